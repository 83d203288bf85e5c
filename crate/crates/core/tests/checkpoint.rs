use hyperformer_core::checkpoint::{load, save, step_dir_name, CheckpointError, MANIFEST, PARAMS};
use hyperformer_core::config::{ModelConfig, RunConfig, Variant};
use hyperformer_core::model::{Batch, Model};
use hyperformer_core::tensor::Tensor;

fn run(variant: Variant) -> RunConfig {
    let mut r = RunConfig::default();
    r.model = ModelConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        d_ff: 16,
        variant,
        ..r.model
    };
    r.seed = 17;
    r
}

fn model(r: &RunConfig) -> Model {
    let mut m = Model::build(&r.model, &r.data.tasks, r.seed).unwrap();
    // Move one parameter off its initial value so loading cannot fall back
    // on initialization.
    let i = m.param_index("embedding").unwrap();
    let mut e: Tensor = m.params()[i].tensor.clone();
    e.data_mut()[5] = 0.125;
    m.set_param_at(i, e).unwrap();
    m
}

#[test]
fn round_trip_is_bit_exact() {
    for v in Variant::ALL {
        let r = run(v);
        let m = model(&r);
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &m, &r, 40).unwrap();
        let c = load(dir.path()).unwrap();
        assert_eq!(c.step, 40);
        assert_eq!(c.model.params(), m.params());
        assert_eq!(c.model.task_names(), m.task_names());
        assert_eq!(c.run.to_pairs(), r.to_pairs());
        let b = Batch::new(&[&[3, 4, 5]], &[&[6, 7]], None).unwrap();
        let a = m.forward(&b, 2, None).unwrap();
        let l = c.model.forward(&b, 2, None).unwrap();
        assert!(a.data().iter().zip(l.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

        // Saving the loaded model again reproduces the same bytes.
        let again = tempfile::tempdir().unwrap();
        save(again.path(), &c.model, &c.run, 40).unwrap();
        for f in [MANIFEST, PARAMS] {
            let x = std::fs::read(dir.path().join(f)).unwrap();
            let y = std::fs::read(again.path().join(f)).unwrap();
            assert_eq!(x, y, "{v}: {f} differs");
        }
    }
}

#[test]
fn trainable_flags_survive() {
    let r = run(Variant::HyperFormerPP);
    let mut m = model(&r);
    let i = m.param_index("task.0.feature").unwrap();
    m.set_trainable(i, false);
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), &m, &r, 1).unwrap();
    assert!(!load(dir.path()).unwrap().model.params()[i].trainable);
}

#[test]
fn manifest_documents_special_ids() {
    let r = run(Variant::Adapters);
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), &model(&r), &r, 3).unwrap();
    let text = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    for line in ["special.pad = 0", "special.end = 1", "special.unk = 2"] {
        assert!(text.lines().any(|l| l.replace(' ', "") == line.replace(' ', "")), "missing {line}");
    }
    assert_eq!(step_dir_name(3), "step-000003");
}

#[test]
fn corruption_detected() {
    let r = run(Variant::HyperFormer);
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), &model(&r), &r, 3).unwrap();
    let params = dir.path().join(PARAMS);
    let mut bytes = std::fs::read(&params).unwrap();
    bytes.pop();
    std::fs::write(&params, &bytes).unwrap();
    assert!(matches!(load(dir.path()), Err(CheckpointError::Corrupt { .. })));

    let manifest = dir.path().join(MANIFEST);
    std::fs::write(&manifest, "format = something-else\n").unwrap();
    assert!(load(dir.path()).is_err());

    let missing = tempfile::tempdir().unwrap();
    assert!(matches!(load(missing.path()), Err(CheckpointError::Io { .. })));
}
