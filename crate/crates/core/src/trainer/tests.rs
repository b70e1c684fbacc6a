use super::*;
use crate::attention::AttentionConfig;
use crate::knocking::KhaConfig;

fn sched(steps: usize) -> TrainConfig {
    TrainConfig {
        lr_peak: 1e-3,
        steps,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_landmarks() {
    let c = sched(2000);
    let w = c.warmup_steps();
    assert_eq!(w, 100);
    assert_eq!(lr_at(0, &c), 0.0);
    assert!((lr_at(50, &c) - 0.5e-3).abs() < 1e-15);
    assert!((lr_at(w, &c) - 1e-3).abs() < 1e-15);
    assert!((lr_at(1999, &c) - 1e-4).abs() < 1e-9);
    // cosine midpoint: (w + 1999) / 2 lands on an integer for odd span
    let c = sched(2001);
    let w = c.warmup_steps();
    let span = 2000 - w;
    assert_eq!(span % 2, 0);
    assert!((lr_at(w + span / 2, &c) - 0.55e-3).abs() < 1e-9);
}

#[test]
fn lr_schedule_is_monotone_after_warmup() {
    let c = sched(500);
    let w = c.warmup_steps();
    for s in 1..w {
        assert!(lr_at(s, &c) > lr_at(s - 1, &c));
    }
    for s in w + 1..500 {
        assert!(lr_at(s, &c) <= lr_at(s - 1, &c));
    }
}

#[test]
fn lr_schedule_degenerate_lengths() {
    for steps in 1..6 {
        let c = sched(steps);
        for s in 0..steps {
            let lr = lr_at(s, &c);
            assert!(
                lr.is_finite() && (0.0..=1e-3).contains(&lr),
                "{steps} {s} {lr}"
            );
        }
    }
}

fn micro(kha: Option<KhaConfig>) -> ModelConfig {
    let mut a = AttentionConfig::new(16, 4, 2).unwrap();
    a.qk_rmsnorm = true;
    a.rope = true;
    let mut m = ModelConfig::new(1, a);
    m.kha = kha;
    m
}

fn corpus() -> Vec<u8> {
    b"the cat sat on the mat and the dog sat on the log. "
        .iter()
        .cycle()
        .take(4000)
        .copied()
        .collect()
}

fn short(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        seq_len: 16,
        batch_tokens: 64,
        seed,
        lr_peak: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_gives_empty_series() {
    let out = train_run::<f32>(&micro(None), &short(0, 1), &corpus()).unwrap();
    assert!(out.record.losses.is_empty());
    assert_eq!(out.record.final_loss, None);
    assert_eq!(out.record.to_csv(), "step,loss,lr,grad_norm\n");
}

#[test]
fn same_seed_is_bitwise_reproducible() {
    let a = train_run::<f32>(&micro(Some(KhaConfig::mlp())), &short(15, 4), &corpus()).unwrap();
    let b = train_run::<f32>(&micro(Some(KhaConfig::mlp())), &short(15, 4), &corpus()).unwrap();
    assert_eq!(a.record.to_csv(), b.record.to_csv());
    assert!(a.model.to_checkpoint().bit_eq(&b.model.to_checkpoint()));
    let c = train_run::<f32>(&micro(Some(KhaConfig::mlp())), &short(15, 5), &corpus()).unwrap();
    assert_ne!(a.record.losses, c.record.losses);
}

#[test]
fn diagonal_kha_matches_baseline_at_step_zero() {
    let base = train_run::<f32>(&micro(None), &short(3, 2), &corpus()).unwrap();
    for kha in [
        KhaConfig::mlp(),
        KhaConfig::gate(),
        KhaConfig::linear(crate::knocking::Sites::QKV),
    ] {
        let k = train_run::<f32>(&micro(Some(kha)), &short(3, 2), &corpus()).unwrap();
        assert!((base.record.losses[0] - k.record.losses[0]).abs() <= 1e-6);
    }
}

#[test]
fn loss_decreases_and_norms_are_clipped_inputs() {
    let out = train_run::<f32>(&micro(None), &short(120, 0), &corpus()).unwrap();
    let r = &out.record;
    assert_eq!(r.losses.len(), 120);
    assert!(
        r.final_loss.unwrap() < r.losses[0] - 0.5,
        "{:?}",
        r.final_loss
    );
    assert!(r.grad_norms.iter().all(|g| g.is_finite() && *g > 0.0));
}

#[test]
fn nan_loss_aborts_with_step() {
    let mut t = short(50, 0);
    t.lr_peak = 1e30;
    t.grad_clip = 1e30;
    let err = match train_run::<f32>(&micro(None), &t, &corpus()) {
        Err(e) => e,
        Ok(_) => panic!("expected divergence"),
    };
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn rejects_bytes_outside_vocab() {
    let mut m = micro(None);
    m.vocab = 64;
    assert!(train_run::<f32>(&m, &short(1, 0), &corpus()).is_err());
}
