//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use xattn_core::analysis::{
    correspondences_from_features, extract_correspondences, gram_distance, structure_iou, Aggregation,
    GramMatrix,
};
use xattn_core::attention::{compute_attention_map, contrast_row, AttentionMode};
use xattn_core::backbone::{
    capture_features, predict, predict_with_plan, AttentionPlan, Conditioning, Denoiser, LayerDirective,
    ToyDenoiser,
};
use xattn_core::guidance::{combine, NoisePrediction};
use xattn_core::latent::{adain, channel_statistics, LatentGrid, MaskGrid, ADAIN_EPSILON};
use xattn_core::pipeline::{
    invert_latent, reconstruct_latent, replay_record, step_plan, transfer_latents, transfer_records,
    MaskProvider, StepWindow, TransferConfig,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, scale: f32) -> f32 {
    let z: f32 = StandardNormal.sample(rng);
    z * scale
}

fn latent(seed: u64) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentGrid::new(Array3::from_shape_fn((4, 8, 8), |_| gaussian(&mut rng, 0.6))).unwrap()
}

fn contrast_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(2..200);
        let mut row: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
        let stats = |r: &[f64]| {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            (m, r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / r.len() as f64)
        };
        let (m0, v0) = stats(&row);
        for beta in [0.0, 0.5, 1.0, 1.67, 3.0] {
            let mut r = row.clone();
            contrast_row(&mut r, beta);
            if beta == 1.0 && r != row {
                return Err("beta = 1 changed a row".into());
            }
            let (m, v) = stats(&r);
            worst_mean = worst_mean.max((m - m0).abs());
            worst_var = worst_var.max((v - beta * beta * v0).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_mean <= 1e-9 && worst_var <= 1e-9 && secs < 1.0,
        format!("mean err {worst_mean:.1e}, variance err {worst_var:.1e}, {secs:.2}s"),
    )
}

fn self_substitution() -> Outcome {
    let start = Instant::now();
    let den = ToyDenoiser::seeded(0);
    let cond = Conditioning::for_domain("object");
    let ids: Vec<String> = den.layer_catalog().iter().map(|l| l.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f32;
    for k in 0..100 {
        let x = latent(1000 + k);
        let t = rng.random_range(1..1000);
        let plain = predict(&den, &x, t, &cond).map_err(|e| e.to_string())?;
        let feats = capture_features(&den, &x, t, &cond, &ids).map_err(|e| e.to_string())?;
        let mut plan = AttentionPlan::default();
        for (id, f) in &feats {
            plan.directives.insert(
                id.clone(),
                LayerDirective::from_features(AttentionMode::CrossImageAppearance, f, 1.0),
            );
        }
        let (sub, _) = predict_with_plan(&den, &x, t, &cond, &plan).map_err(|e| e.to_string())?;
        worst = worst.max(sub.epsilon.max_abs_diff(&plain.epsilon));
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-5 && secs < 10.0, format!("max abs err {worst:.1e} over 100 latents, {secs:.2}s"))
}

fn guidance_collapse() -> Outcome {
    let grid = |v: &[f32]| LatentGrid::new(Array3::from_shape_vec((2, 1, 1), v.to_vec()).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let a: Vec<f32> = (0..256).map(|_| gaussian(&mut rng, 3.0)).collect();
        let b: Vec<f32> = (0..256).map(|_| gaussian(&mut rng, 3.0)).collect();
        let g = |v: &[f32]| LatentGrid::new(Array3::from_shape_vec((4, 8, 8), v.to_vec()).unwrap()).unwrap();
        let s = NoisePrediction::new(g(&a), AttentionMode::SelfAttention);
        let x = NoisePrediction::new(g(&b), AttentionMode::CrossImageAppearance);
        if combine(&s, &x, 0.0).unwrap().epsilon.data != s.epsilon.data {
            return Err("alpha = 0 is not the self prediction".into());
        }
        if combine(&s, &x, 1.0).unwrap().epsilon.data != x.epsilon.data {
            return Err("alpha = 1 is not the cross prediction".into());
        }
    }
    let s = NoisePrediction::new(grid(&[1.0, 0.0]), AttentionMode::SelfAttention);
    let x = NoisePrediction::new(grid(&[0.0, 1.0]), AttentionMode::CrossImageAppearance);
    let out = combine(&s, &x, 3.5).unwrap().epsilon.data;
    let err = (out[[0, 0, 0]] + 2.5).abs().max((out[[1, 0, 0]] - 3.5).abs());
    check(err <= 1e-7, format!("exact at alpha 0 and 1, hand case [{}, {}]", out[[0, 0, 0]], out[[1, 0, 0]]))
}

fn adain_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut dm, mut ds) = (0.0f32, 0.0f32);
    for k in 0..100 {
        let t = latent(2000 + k);
        let mut r = latent(3000 + k);
        let (shift, gain) = (gaussian(&mut rng, 2.0), 0.2 + rng.random::<f32>() * 3.0);
        r.data.mapv_inplace(|v| v * gain + shift);
        let out = adain(&t, &r, None, None, ADAIN_EPSILON).unwrap();
        let (om, os) = channel_statistics(&out, None).unwrap();
        let (rm, rs) = channel_statistics(&r, None).unwrap();
        for c in 0..4 {
            dm = dm.max((om[c] - rm[c]).abs());
            ds = ds.max((os[c] - rs[c]).abs());
        }
        let mask = MaskGrid::new(Array2::from_shape_fn((8, 8), |(y, x)| (y * 8 + x + k as usize).is_multiple_of(3)));
        let masked = adain(&t, &r, Some(&mask), Some(&mask), ADAIN_EPSILON).unwrap();
        for ((c, y, x), &v) in masked.data.indexed_iter() {
            if !mask.data[[y, x]] && v.to_bits() != t.data[[c, y, x]].to_bits() {
                return Err(format!("masked AdaIN touched pixel ({y}, {x}) of pair {k}"));
            }
        }
    }
    check(
        dm <= 1e-5 && ds <= 1e-4,
        format!("mean err {dm:.1e}, std err {ds:.1e} over 100 pairs; masked copy-through bitwise"),
    )
}

fn inversion_roundtrip() -> Outcome {
    let den = ToyDenoiser::seeded(0);
    let (mut worst_err, mut worst_secs) = (0.0f32, 0.0f64);
    for seed in 0..10 {
        let start = Instant::now();
        let config = TransferConfig {
            seed,
            ..TransferConfig::default()
        };
        let x = latent(4000 + seed);
        let rec = invert_latent(&x, &config, &den).map_err(|e| e.to_string())?;
        let back = replay_record(&rec, &config, &den).map_err(|e| e.to_string())?;
        worst_err = worst_err.max(back.max_abs_diff(&x));
        worst_secs = worst_secs.max(start.elapsed().as_secs_f64());
    }
    check(
        worst_err < 1e-4 && worst_secs < 5.0,
        format!("max abs err {worst_err:.1e}, slowest seed {worst_secs:.2}s, T = 100"),
    )
}

fn degenerate_transfer() -> Outcome {
    let den = ToyDenoiser::seeded(0);
    let config = TransferConfig::default();
    let mut worst = 0.0f32;
    for seed in 0..5 {
        let x = latent(5000 + seed);
        let r = transfer_latents(&x, &x, &config, &den, &MaskProvider::None).map_err(|e| e.to_string())?;
        worst = worst.max(r.output.mean_abs_diff(&x));
    }
    check(worst < 1e-3, format!("worst mean abs err {worst:.1e} over 5 latents"))
}

fn ablation_ladder() -> Outcome {
    let den = ToyDenoiser::seeded(0);
    let full = TransferConfig::default();
    let mut no_adain = full.clone();
    no_adain.adain_window = StepWindow::EMPTY;
    let mut no_guidance = no_adain.clone();
    no_guidance.guidance_alpha = 1.0;
    let baseline = full.clone().kv_swap_baseline();
    let mut rows = Vec::new();
    for pair in 0..4 {
        let (s, a) = (latent(6000 + 2 * pair), latent(6001 + 2 * pair));
        let rs = invert_latent(&s, &full, &den).map_err(|e| e.to_string())?;
        let ra = invert_latent(&a, &full, &den).map_err(|e| e.to_string())?;
        let run = |c: &TransferConfig| {
            transfer_records(&rs, &ra, &a, c, &den, &MaskProvider::None).map(|r| r.output)
        };
        let base = run(&baseline).map_err(|e| e.to_string())?;
        let d: Vec<f32> = [&full, &no_adain, &no_guidance]
            .iter()
            .map(|c| run(c).map(|o| o.mean_abs_diff(&base)))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        if !(d[0] > d[1] && d[1] > d[2] && d[2] > 0.0) {
            return Err(format!("pair {pair}: distances to baseline {d:?} are not decreasing"));
        }
        rows.push(d);
    }
    let off = full.clone().disabled();
    let (s, a) = (latent(6100), latent(6101));
    let out = transfer_latents(&s, &a, &off, &den, &MaskProvider::None).map_err(|e| e.to_string())?;
    let plain = reconstruct_latent(&s, &off, &den).map_err(|e| e.to_string())?;
    let err = out.output.max_abs_diff(&plain);
    check(
        err <= 1e-4,
        format!("AdaIN, guidance, contrast removed in turn: distance to K/V swap {:?} (pair 0), all off vs reconstruction {err:.1e}", rows[0]),
    )
}

fn correspondence_oracle() -> Outcome {
    let (h, w, d) = (32usize, 32usize, 32usize);
    let n = h * w;
    let scale = 1.0 / (d as f32).sqrt();
    let (mut worst, mut agree_all) = (1.0f64, true);
    for trial in 0..16u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + trial);
        let features = Array2::from_shape_fn((n, d), |_| gaussian(&mut rng, 1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // the feature at query pixel i sits at key pixel perm[i]
        let mut keys = Array2::<f32>::zeros((n, d));
        for (i, &p) in perm.iter().enumerate() {
            keys.row_mut(p).assign(&features.row(i));
        }
        let queries = features.mapv(|v| v + gaussian(&mut rng, 0.2));
        let map = compute_attention_map(queries.view(), keys.view(), scale).map_err(|e| e.to_string())?;
        let brute = extract_correspondences(&[map], &Aggregation::SingleLayer(0), (h, w), (h, w))
            .map_err(|e| e.to_string())?;
        let fast = correspondences_from_features(queries.view(), keys.view(), scale, (h, w), (h, w))
            .map_err(|e| e.to_string())?;
        worst = worst.min(brute.agreement(&perm));
        agree_all &= brute.flat_indices() == fast.flat_indices();
    }
    check(
        worst >= 0.95 && agree_all,
        format!("worst agreement {:.2}% over 16 permutations, brute force == fast path: {agree_all}", 100.0 * worst),
    )
}

fn metrics() -> Outcome {
    let mask = |f: fn(usize, usize) -> bool| MaskGrid::new(Array2::from_shape_fn((4, 4), |(y, x)| f(y, x)));
    let left = mask(|_, x| x < 2);
    let ious = [
        structure_iou(&left, &left).unwrap(),
        structure_iou(&left, &mask(|_, x| x >= 2)).unwrap(),
        structure_iou(&left, &MaskGrid::full(4, 4)).unwrap(),
    ];
    let f = Array3::from_shape_vec((2, 1, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let g = GramMatrix::of(&f).matrix;
    let hand = [[0.25, 0.0], [0.0, 0.25]];
    let gerr = (0..4).map(|k| (g[[k / 2, k % 2]] - hand[k / 2][k % 2]).abs()).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let stack: Vec<Array3<f32>> = (0..5)
        .map(|_| Array3::from_shape_fn((8, 4, 4), |_| gaussian(&mut rng, 1.0)))
        .collect();
    let same = gram_distance(&stack, &stack, &[0.2; 5]).unwrap();
    check(
        ious == [1.0, 0.0, 0.5] && same == 0.0 && gerr <= 1e-9,
        format!("IoU {ious:?}, identical-stack distance {same}, hand Gram err {gerr:.1e}"),
    )
}

fn window_soundness() -> Outcome {
    let text = "injection_window_32 = 10..70\ninjection_window_64 = 10..90\nstructure_injection_period = 5\ncontrast_beta = 1.67\n";
    let config = TransferConfig::parse(text).map_err(|e| e.to_string())?;
    let den = ToyDenoiser::seeded(0);
    let catalog = den.layer_catalog();
    for i in 0..config.num_steps {
        let plan = step_plan(i, &config, catalog);
        let expect: Vec<&str> = catalog
            .iter()
            .filter(|l| match l.resolution {
                32 => (10..70).contains(&i),
                64 => (10..90).contains(&i),
                _ => false,
            } && l.location == xattn_core::backbone::Location::Decoder)
            .map(|l| l.id.as_str())
            .collect();
        let got = plan.layer_ids();
        if got != expect {
            return Err(format!("iteration {i}: directed layers {got:?}, expected {expect:?}"));
        }
        if plan.is_empty() != !(10..90).contains(&i) {
            return Err(format!("iteration {i}: plan emptiness wrong"));
        }
        let want = if i % 5 == 0 {
            AttentionMode::CrossImageStructure
        } else {
            AttentionMode::CrossImageAppearance
        };
        if plan.layers.values().any(|&m| m != want) {
            return Err(format!("iteration {i}: expected {want:?} directives"));
        }
        if plan.contrast_factor != config.contrast_beta {
            return Err(format!("iteration {i}: contrast factor not echoed"));
        }
    }
    check(true, "empty outside [10,90); 32 in [10,70), 64 in [10,90); structure on multiples of 5".into())
}

fn cli_determinism() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_xattn");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin)
            .args(args)
            .current_dir(dir.path())
            .env_remove("XATTN_CACHE_DIR")
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
        }
    };
    run(&["samples", "--out", "samples"])?;
    let transfer = |out: &str| {
        run(&["transfer", "--struct", "samples/struct.png", "--app", "samples/app.png", "--out", out, "--seed", "3"])
    };
    transfer("run1")?;
    let first = start.elapsed().as_secs_f64();
    transfer("run2")?;
    let read = |p: &Path| fs::read(dir.path().join(p)).map_err(|e| e.to_string());
    let mut same = true;
    for name in ["output.png", "manifest.txt"] {
        same &= read(&Path::new("run1").join(name))? == read(&Path::new("run2").join(name))?;
    }
    check(
        same && first < 30.0,
        format!("output.png and manifest.txt byte-identical: {same}, first transfer {first:.2}s"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("contrast correctness", contrast_correctness),
        ("self-substitution oracle", self_substitution),
        ("guidance collapse", guidance_collapse),
        ("AdaIN post-statistics", adain_statistics),
        ("inversion roundtrip", inversion_roundtrip),
        ("degenerate transfer", degenerate_transfer),
        ("mechanism ablation ladder", ablation_ladder),
        ("correspondence oracle", correspondence_oracle),
        ("metrics", metrics),
        ("window soundness", window_soundness),
        ("end-to-end determinism", cli_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
