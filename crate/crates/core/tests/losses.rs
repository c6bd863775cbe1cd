use proptest::prelude::*;
use ssgnet_core::losses::*;

fn batch_from(seed_probs: &[f64], seed_targets: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let p = seed_probs.iter().map(|v| v.clamp(0.001, 0.999)).collect();
    let y = seed_targets.iter().map(|&b| f64::from(u8::from(b))).collect();
    (p, y)
}

#[test]
fn f32_and_f64_losses_agree() {
    let p64: Vec<f64> = (0..64).map(|i| 0.05 + 0.9 * (i as f64 / 63.0)).collect();
    let y64: Vec<f64> = (0..64).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
    let p32: Vec<f32> = p64.iter().map(|&v| v as f32).collect();
    let y32: Vec<f32> = y64.iter().map(|&v| v as f32).collect();
    let b64 = PredictionBatch::new(&p64, &y64, 2).unwrap();
    let b32 = PredictionBatch::new(&p32, &y32, 2).unwrap();
    assert!((f64::from(bce_dice_loss(&b32)) - bce_dice_loss(&b64)).abs() < 1e-5);
    let k = KappaState::with_defaults(2);
    let t32 = f64::from(tvmf_dice_loss_binary(&b32, &k).unwrap());
    assert!((t32 - tvmf_dice_loss_binary(&b64, &k).unwrap()).abs() < 1e-5);
}

#[test]
fn kappa_feeds_the_loss() {
    let p = [0.8, 0.3, 0.6, 0.1];
    let y = [1.0, 0.0, 1.0, 0.0];
    let b = PredictionBatch::new(&p, &y, 1).unwrap();
    let flat = KappaState::with_defaults(2);
    let sharp = update_kappa(&flat, &[0.9, 0.9]).unwrap();
    assert!(sharp.kappa.iter().all(|&k| k > 0.0));
    assert_ne!(tvmf_dice_loss_binary(&b, &flat).unwrap(), tvmf_dice_loss_binary(&b, &sharp).unwrap());
}

proptest! {
    #[test]
    fn losses_are_bounded(
        probs in prop::collection::vec(0.0f64..1.0, 16),
        targets in prop::collection::vec(any::<bool>(), 16),
        kappa in 0.0f64..128.0,
    ) {
        let (p, y) = batch_from(&probs, &targets);
        let b = PredictionBatch::new(&p, &y, 2).unwrap();
        prop_assert!(bce_loss(&b) >= 0.0);
        let dice = dice_loss(&b, DICE_EPS);
        prop_assert!((0.0..=1.0).contains(&dice));
        let mut k = KappaState::with_defaults(2);
        k.kappa = vec![kappa; 2];
        let t = tvmf_dice_loss_binary(&b, &k).unwrap();
        prop_assert!((0.0..4.0).contains(&t), "{}", t);
    }

    #[test]
    fn grad_values_match_the_plain_losses(
        probs in prop::collection::vec(0.0f64..1.0, 12),
        targets in prop::collection::vec(any::<bool>(), 12),
    ) {
        let (p, y) = batch_from(&probs, &targets);
        let b = PredictionBatch::new(&p, &y, 3).unwrap();
        prop_assert_eq!(bce_loss_grad(&b).0, bce_loss(&b));
        prop_assert_eq!(dice_loss_grad(&b, DICE_EPS).0, dice_loss(&b, DICE_EPS));
        prop_assert_eq!(bce_dice_loss_grad(&b).0, bce_dice_loss(&b));
        // BCE pushes each probability toward its target
        for ((g, &pi), &yi) in bce_loss_grad(&b).1.iter().zip(&p).zip(&y) {
            if yi == 1.0 && pi < 0.999 {
                prop_assert!(*g < 0.0);
            }
            if yi == 0.0 && pi > 0.001 {
                prop_assert!(*g > 0.0);
            }
        }
    }
}
