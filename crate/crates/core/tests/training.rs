use posealign_core::augment::{DiscriminatorConfig, GeneratorConfig};
use posealign_core::data::{synth_generate, Dataset, SynthConfig};
use posealign_core::par::Exec;
use posealign_core::pipeline::{
    adapt, pretrain, AdaptMode, GanState, LifterConfig, PretrainConfig, TrainConfig,
};

fn pre_cfg(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        epochs,
        batch_size: 16,
        lr: 1e-3,
        seed: 21,
        lifter: LifterConfig { hidden_dim: 32, block_count: 1, depth_per_block: 2, slope: 0.2 },
        ..Default::default()
    }
}

/// 2000 single-record steps in 20 stages, with the step size decaying
/// geometrically from 1e-3 to 1e-6 so RMSProp can settle.
#[test]
fn overfits_a_single_record() {
    let one = synth_generate(&SynthConfig::source_default(1, 2)).unwrap().dataset;
    let mut state = pre_cfg(0).init_state(16).unwrap();
    let mut best = f64::INFINITY;
    for stage in 0..20 {
        let lr = 1e-3 * 1e-3f64.powf(stage as f64 / 19.0);
        let cfg = PretrainConfig { start_epoch: stage * 100, epochs: (stage + 1) * 100, batch_size: 1, lr, ..pre_cfg(0) };
        pretrain(&mut state, &one, &cfg, Exec::Sequential, &mut |s| best = best.min(s.loss)).unwrap();
    }
    assert!(best < 1e-3, "best loss {best} mm^2");
}

fn datasets() -> (Dataset, Dataset) {
    let s = synth_generate(&SynthConfig::source_default(80, 1)).unwrap().dataset;
    let t = synth_generate(&SynthConfig::target_default(40, 2)).unwrap().dataset;
    (s, t)
}

/// With no alignment, adaptation is the same optimizer loop over the same
/// batches as supervised training.
#[test]
fn none_mode_equals_pretrain_continuation() {
    let (s, t) = datasets();
    let mut base = pre_cfg(2).init_state(16).unwrap();
    pretrain(&mut base, &s, &pre_cfg(2), Exec::Parallel, &mut |_| {}).unwrap();

    let cfg = TrainConfig {
        epochs: 3,
        iters_per_epoch: 6,
        warmup_epochs: 0,
        batch_size: 16,
        lr_lifter: 5e-4,
        seed: 33,
        mode: AdaptMode::None,
        generator: GeneratorConfig { hidden_dim: 8, noise_dim: 4, ..Default::default() },
        discriminator: DiscriminatorConfig { hidden_dim: 8, ..Default::default() },
        ..Default::default()
    };
    let mut adapted = base.clone();
    let mut gan = GanState::new(&cfg, &s.skeleton).unwrap();
    let gan_before = gan.to_checkpoint();
    adapt(&mut adapted, &mut gan, &s, &t, None, &cfg, Exec::Parallel, &mut |_| {}).unwrap();
    assert_eq!(gan.to_checkpoint(), gan_before);

    let cont = PretrainConfig { epochs: 3, iters_per_epoch: Some(6), lr: 5e-4, seed: 33, ..pre_cfg(0) };
    let mut continued = base.clone();
    pretrain(&mut continued, &s, &cont, Exec::Sequential, &mut |_| {}).unwrap();
    assert_eq!(adapted.net.store, continued.net.store);
    assert_eq!(adapted.opt, continued.opt);
    assert_ne!(adapted.net.store, base.net.store);
}

#[test]
fn full_run_is_reproducible_across_exec_modes() {
    let (s, t) = datasets();
    let cfg = TrainConfig {
        epochs: 2,
        iters_per_epoch: 6,
        warmup_epochs: 1,
        generator_interval: 3,
        batch_size: 8,
        seed: 5,
        generator: GeneratorConfig { hidden_dim: 8, noise_dim: 4, ..Default::default() },
        discriminator: DiscriminatorConfig { hidden_dim: 8, ..Default::default() },
        ..Default::default()
    };
    let run = |exec| {
        let mut l = pre_cfg(1).init_state(16).unwrap();
        let mut gan = GanState::new(&cfg, &s.skeleton).unwrap();
        let out = adapt(&mut l, &mut gan, &s, &t, None, &cfg, exec, &mut |_| {}).unwrap();
        (l.to_checkpoint().to_bytes(), gan.to_checkpoint().to_bytes(), out.report)
    };
    let a = run(Exec::Parallel);
    let b = run(Exec::Parallel);
    let c = run(Exec::Sequential);
    assert_eq!(a, b);
    assert_eq!(a, c);
}
