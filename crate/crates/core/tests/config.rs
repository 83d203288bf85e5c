use hyperformer_core::config::{Ablations, ConfigError, OptimizerKind, RunConfig, Variant};

#[test]
fn defaults_validate() {
    let r = RunConfig::default();
    r.validate().unwrap();
    assert_eq!(r.model.variant, Variant::HyperFormerPP);
    assert_eq!(r.train.steps, 8192);
    assert_eq!(r.train.learning_rate, 3e-4);
    assert_eq!(r.data.tasks, vec!["copy", "reverse", "shift-1"]);
}

#[test]
fn text_round_trip() {
    let text = "
        # comment
        variant = adapters
        layers = 3
        learning_rate = 0.001
        optimizer = sgd
        tasks = copy,sort
        task.sort.train_size = 77
        ablations = freeze-base-ln
    ";
    let r = RunConfig::parse(text).unwrap();
    assert_eq!(r.model.variant, Variant::Adapters);
    assert_eq!(r.model.layers, 3);
    assert_eq!(r.train.optimizer, OptimizerKind::Sgd);
    assert!(r.model.ablations.freeze_base_ln);
    assert_eq!(r.data.task_spec("sort", r.seed).unwrap().train_size, 77);
    assert_eq!(r.data.task_spec("copy", r.seed).unwrap().train_size, 2000);
    let back = RunConfig::parse(&r.to_text()).unwrap();
    assert_eq!(back.to_pairs(), r.to_pairs());
}

#[test]
fn overrides_take_precedence() {
    let mut r = RunConfig::parse("hidden = 32\nheads = 4").unwrap();
    r.apply_override("hidden=16").unwrap();
    assert_eq!(r.model.hidden, 16);
    assert!(r.apply_override("hidden").is_err());
}

#[test]
fn invalid_configurations_rejected() {
    assert!(matches!(RunConfig::parse("nonsense = 1"), Err(ConfigError::UnknownKey(_))));
    assert!(matches!(RunConfig::parse("layers = two"), Err(ConfigError::InvalidValue { .. })));
    assert!(matches!(RunConfig::parse("layers"), Err(ConfigError::Syntax { line: 1, .. })));
    assert!(RunConfig::parse("temperature = 0").is_err());
    assert!(RunConfig::parse("hidden = 10\nheads = 4").is_err());
    assert!(RunConfig::parse("variant = adapters\nablations = no-adapters").is_err());
    assert!(RunConfig::parse("variant = hyperformer\nablations = no-task-projector\ntask_dim = 8\ntask_feature_dim = 16").is_err());
    assert!(RunConfig::parse("vocab = 8").is_err());
    assert!(RunConfig::parse("max_len = 5").is_err());
}

#[test]
fn ablation_names() {
    for name in Ablations::all_names() {
        let a = Ablations::single(name).unwrap();
        assert_eq!(a.to_string(), *name);
        assert_eq!(a.to_string().parse::<Ablations>().unwrap(), a);
    }
    assert_eq!(Ablations::default().to_string(), "none");
    assert!(Ablations::single("bogus").is_err());
}

#[test]
fn variant_names() {
    for v in Variant::ALL {
        assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
    }
}

#[test]
fn reduction_sets_bottleneck() {
    let mut r = RunConfig::default();
    r.model.set_reduction(16).unwrap();
    assert_eq!(r.model.bottleneck, 4);
    assert!(r.model.set_reduction(0).is_err());
}
