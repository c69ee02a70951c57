use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use xattn_core::attention::AttentionMode;
use xattn_core::backbone::ToyDenoiser;
use xattn_core::latent::{channel_statistics, LatentGrid, MaskGrid};
use xattn_core::pipeline::*;

fn latent(seed: u64) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0f32, 0.6).unwrap();
    LatentGrid::new(Array3::from_shape_fn((4, 8, 8), |_| n.sample(&mut rng))).unwrap()
}

fn short_config() -> TransferConfig {
    TransferConfig::parse(
        "num_steps = 20\ninjection_window_32 = 2..14\ninjection_window_64 = 2..18\nadain_window = 4..20\n",
    )
    .unwrap()
}

#[test]
fn identical_inputs_reconstruct() {
    let den = ToyDenoiser::seeded(0);
    let x = latent(1);
    let r = transfer_latents(&x, &x, &TransferConfig::default(), &den, &MaskProvider::None).unwrap();
    let err = r.output.mean_abs_diff(&x);
    assert!(err < 1e-3, "mean abs error {err}");
    assert!(r.drift_warning.is_none());
}

#[test]
fn everything_disabled_is_plain_reconstruction() {
    let den = ToyDenoiser::seeded(0);
    let (s, a) = (latent(2), latent(3));
    let c = short_config().disabled();
    let r = transfer_latents(&s, &a, &c, &den, &MaskProvider::None).unwrap();
    let plain = reconstruct_latent(&s, &c, &den).unwrap();
    assert_eq!(r.output, plain);
    assert!(r.output.max_abs_diff(&s) < 1e-4);
}

#[test]
fn appearance_branch_is_untouched() {
    let den = ToyDenoiser::seeded(0);
    let (s, a) = (latent(4), latent(5));
    let c = short_config();
    let r = transfer_latents(&s, &a, &c, &den, &MaskProvider::None).unwrap();
    assert_eq!(r.appearance, reconstruct_latent(&a, &c, &den).unwrap());
    assert_eq!(r.structure, reconstruct_latent(&s, &c, &den).unwrap());
}

#[test]
fn steps_outside_windows_run_plain() {
    let den = ToyDenoiser::seeded(0);
    let (s, a) = (latent(6), latent(7));
    let mut c = short_config();
    c.adain_window = StepWindow::EMPTY;
    c.injection_window_32 = StepWindow::new(8, 12);
    c.injection_window_64 = StepWindow::new(8, 12);
    let r = transfer_latents(&s, &a, &c, &den, &MaskProvider::None).unwrap();
    for rec in &r.steps {
        let inside = (8..12).contains(&rec.iteration);
        assert_eq!(rec.mode != AttentionMode::SelfAttention, inside, "{rec}");
        assert_eq!(rec.guided, inside && rec.mode == AttentionMode::CrossImageAppearance);
    }
    // until the first window the output branch is the structure branch
    c.num_steps = 8;
    c.injection_window_32 = StepWindow::EMPTY;
    c.injection_window_64 = StepWindow::EMPTY;
    let early = transfer_latents(&s, &a, &c, &den, &MaskProvider::None).unwrap();
    assert_eq!(early.output, early.structure);
}

#[test]
fn adain_pulls_statistics_to_appearance() {
    let den = ToyDenoiser::seeded(0);
    let s = latent(8);
    // appearance: same pixel values in a shuffled layout
    let mut perm: Vec<usize> = (0..64).collect();
    perm.reverse();
    perm.rotate_left(13);
    let a = LatentGrid::new(Array3::from_shape_fn((4, 8, 8), |(c, y, x)| {
        let p = perm[y * 8 + x];
        s.data[[c, p / 8, p % 8]] * 1.7 + 0.4
    }))
    .unwrap();
    let r = transfer_latents(&s, &a, &TransferConfig::default(), &den, &MaskProvider::None).unwrap();
    let (mo, so) = channel_statistics(&r.output, None).unwrap();
    let (ma, sa) = channel_statistics(&a, None).unwrap();
    for c in 0..4 {
        assert!((mo[c] - ma[c]).abs() <= 0.05 * ma[c].abs().max(sa[c]), "mean {c}");
        assert!((so[c] - sa[c]).abs() <= 0.05 * sa[c], "std {c}");
    }
}

#[test]
fn transfer_is_deterministic() {
    let den = ToyDenoiser::seeded(0);
    let (s, a) = (latent(9), latent(10));
    let c = short_config();
    let r1 = transfer_latents(&s, &a, &c, &den, &MaskProvider::None).unwrap();
    let r2 = transfer_latents(&s, &a, &c, &den, &MaskProvider::None).unwrap();
    assert_eq!(r1.output, r2.output);
    assert_eq!(r1.step_log(), r2.step_log());
}

#[test]
fn masks_restrict_adain() {
    let den = ToyDenoiser::seeded(0);
    let (s, a) = (latent(11), latent(12));
    let mut c = short_config();
    c.use_masks = true;
    let half = MaskGrid::new(ndarray::Array2::from_shape_fn((8, 8), |(_, x)| x < 4));
    let user = MaskProvider::UserFile {
        structure: half.clone(),
        appearance: half,
    };
    let r = transfer_latents(&s, &a, &c, &den, &user).unwrap();
    assert!(r.steps.iter().any(|s| s.adain == AdainUse::Masked));

    c.capture_attention = true;
    let derived = transfer_latents(&s, &a, &c, &den, &MaskProvider::AttentionDerived).unwrap();
    let (out_mask, app_mask) = derived.masks.expect("attention-derived masks");
    assert_eq!(out_mask.shape(), (8, 8));
    assert!(app_mask.count() >= 2 && app_mask.count() < 64);
    assert!(!derived.attention.is_empty());
    for cap in &derived.attention {
        for row in cap.map.weights.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn records_must_match_config() {
    let den = ToyDenoiser::seeded(0);
    let x = latent(13);
    let c = short_config();
    let rec = invert_latent(&x, &c, &den).unwrap();
    let mut other = c.clone();
    other.num_steps = 100;
    other.injection_window_32 = StepWindow::new(10, 70);
    other.injection_window_64 = StepWindow::new(10, 90);
    other.adain_window = StepWindow::new(20, 100);
    assert!(transfer_records(&rec, &rec, &x, &other, &den, &MaskProvider::None).is_err());
    assert!(replay_record(&rec, &c, &den).unwrap().max_abs_diff(&x) < 1e-4);
}
