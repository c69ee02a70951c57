//! Noise schedules, the parameterized DDIM/DDPM update, and edit-friendly
//! DDPM inversion.
//!
//! Steps are indexed `t = 1..=T`; step `t` moves a latent from noise level
//! `alpha_bar(t)` to `alpha_bar_prev(t)`. The level before step 1 is the
//! schedule's `final_alpha_bar`, which is kept below one so every stochastic
//! step has non-zero variance and inversion stays solvable.

use ndarray::{Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::latent::LatentGrid;

pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;
pub const DEFAULT_TRAIN_STEPS: usize = 1000;

/// How inference steps are laid out over the beta range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spacing {
    /// One linearly spaced beta per inference step.
    Linear,
    /// Linear betas over `train_steps`, subsampled at a fixed stride.
    Strided { train_steps: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    final_alpha_bar: f64,
    timesteps: Vec<usize>,
}

impl DiffusionSchedule {
    /// Default inference schedule: `num_steps` strided from a 1000-step
    /// linear training schedule.
    pub fn inference(num_steps: usize) -> Result<Self> {
        make_schedule(
            num_steps,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
            Spacing::Strided {
                train_steps: DEFAULT_TRAIN_STEPS,
            },
        )
    }

    /// Builds a schedule from explicit cumulative products.
    ///
    /// `alpha_bars` must be strictly decreasing in `(0, 1)` and below
    /// `final_alpha_bar`, itself in `(0, 1]`.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>, final_alpha_bar: f64) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(final_alpha_bar > 0.0 && final_alpha_bar <= 1.0) {
            return Err(Error::config(format!(
                "final alpha_bar {final_alpha_bar} outside (0, 1]"
            )));
        }
        let mut prev = final_alpha_bar;
        let mut betas = Vec::with_capacity(alpha_bars.len());
        let mut cum_prev = 1.0;
        for (i, &ab) in alpha_bars.iter().enumerate() {
            if !(ab > 0.0 && ab < 1.0) {
                return Err(Error::config(format!("alpha_bar[{i}] = {ab} outside (0, 1)")));
            }
            if ab >= prev {
                return Err(Error::config(format!(
                    "alpha_bars must be strictly decreasing (step {} has {ab} >= {prev})",
                    i + 1
                )));
            }
            betas.push(1.0 - ab / cum_prev);
            cum_prev = ab;
            prev = ab;
        }
        let timesteps = (1..=alpha_bars.len()).collect();
        Ok(Self {
            betas,
            alpha_bars,
            final_alpha_bar,
            timesteps,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn final_alpha_bar(&self) -> f64 {
        self.final_alpha_bar
    }

    /// Noise level at step `t` (1-based).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Noise level reached after step `t`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            self.final_alpha_bar
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Timestep value handed to the denoiser at step `t` (training-schedule units).
    pub fn timestep_value(&self, t: usize) -> usize {
        self.timesteps[t - 1]
    }

    /// Standard deviation of the injected noise at step `t`.
    pub fn sigma(&self, t: usize, eta: f64) -> f64 {
        ddim_sigma(self.alpha_bar(t), self.alpha_bar_prev(t), eta)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::config(format!(
                "step {t} outside [1, {}]",
                self.num_steps()
            )));
        }
        Ok(())
    }
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    (0..n)
        .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
        .collect()
}

fn cumprod(betas: &[f64]) -> Vec<f64> {
    betas
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect()
}

/// Builds a schedule with linearly spaced betas.
///
/// With [`Spacing::Linear`] the level before the first step sits half a beta
/// above `alpha_bars[0]`; with [`Spacing::Strided`] it is the first training
/// level.
pub fn make_schedule(
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
    spacing: Spacing,
) -> Result<DiffusionSchedule> {
    if num_steps == 0 {
        return Err(Error::config("num_steps must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "invalid beta range [{beta_start}, {beta_end}]; need 0 < start <= end < 1"
        )));
    }
    match spacing {
        Spacing::Linear => {
            let betas = linspace(beta_start, beta_end, num_steps);
            let alpha_bars = cumprod(&betas);
            DiffusionSchedule::from_alpha_bars(alpha_bars, 1.0 - 0.5 * beta_start)
        }
        Spacing::Strided { train_steps } => {
            if train_steps <= num_steps {
                return Err(Error::config(format!(
                    "cannot stride {num_steps} steps out of {train_steps} training steps"
                )));
            }
            let train = cumprod(&linspace(beta_start, beta_end, train_steps));
            let stride = train_steps / num_steps;
            let timesteps: Vec<usize> = (0..num_steps).map(|k| 1 + k * stride).collect();
            let alpha_bars = timesteps.iter().map(|&i| train[i]).collect();
            let mut schedule = DiffusionSchedule::from_alpha_bars(alpha_bars, train[0])?;
            schedule.timesteps = timesteps;
            Ok(schedule)
        }
    }
}

/// DDIM noise standard deviation, scaled by `eta`.
pub fn ddim_sigma(alpha_bar_t: f64, alpha_bar_prev: f64, eta: f64) -> f64 {
    let var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t) * (1.0 - alpha_bar_t / alpha_bar_prev);
    eta * var.max(0.0).sqrt()
}

/// `(x_t - sqrt(1 - alpha_bar) * eps) / sqrt(alpha_bar)`.
pub fn predict_x0(x_t: &LatentGrid, epsilon: &LatentGrid, alpha_bar_t: f64) -> LatentGrid {
    let a = alpha_bar_t.sqrt();
    let b = (1.0 - alpha_bar_t).sqrt();
    let data = Zip::from(&x_t.data)
        .and(&epsilon.data)
        .map_collect(|&x, &e| ((x as f64 - b * e as f64) / a) as f32);
    LatentGrid {
        data,
        timestep_index: x_t.timestep_index,
    }
}

/// Deterministic part of the update: `sqrt(ab_prev) * x0 + sqrt(1 - ab_prev - sigma^2) * eps`.
fn step_mean(
    x_t: &LatentGrid,
    epsilon: &LatentGrid,
    ab_t: f64,
    ab_prev: f64,
    sigma: f64,
) -> Array3<f64> {
    let a_t = ab_t.sqrt();
    let b_t = (1.0 - ab_t).sqrt();
    let a_prev = ab_prev.sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    Zip::from(&x_t.data)
        .and(&epsilon.data)
        .map_collect(|&x, &e| {
            let x0 = (x as f64 - b_t * e as f64) / a_t;
            a_prev * x0 + dir * e as f64
        })
}

/// One update between explicit noise levels.
pub fn ddim_step(
    x_t: &LatentGrid,
    epsilon: &LatentGrid,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
    injected_noise: Option<&LatentGrid>,
    eta: f64,
) -> Result<LatentGrid> {
    x_t.check_same_shape(epsilon, "sampling step")?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config(format!("eta {eta} outside [0, 1]")));
    }
    let sigma = ddim_sigma(alpha_bar_t, alpha_bar_prev, eta);
    let mean = step_mean(x_t, epsilon, alpha_bar_t, alpha_bar_prev, sigma);
    let data = if eta > 0.0 {
        let noise = injected_noise
            .ok_or_else(|| Error::config("eta > 0 requires an injected noise map"))?;
        x_t.check_same_shape(noise, "injected noise")?;
        Zip::from(&mean)
            .and(&noise.data)
            .map_collect(|&m, &z| (m + sigma * z as f64) as f32)
    } else {
        mean.mapv(|m| m as f32)
    };
    Ok(LatentGrid {
        data,
        timestep_index: x_t.timestep_index.saturating_sub(1),
    })
}

/// Moves `x_t` to step `t - 1`.
///
/// `eta = 0` is deterministic DDIM; `eta = 1` with stored noise maps replays
/// an edit-friendly inversion.
pub fn sampling_step(
    x_t: &LatentGrid,
    epsilon: &LatentGrid,
    t: usize,
    schedule: &DiffusionSchedule,
    injected_noise: Option<&LatentGrid>,
    eta: f64,
) -> Result<LatentGrid> {
    schedule.check_step(t)?;
    let mut out = ddim_step(
        x_t,
        epsilon,
        schedule.alpha_bar(t),
        schedule.alpha_bar_prev(t),
        injected_noise,
        eta,
    )?;
    out.timestep_index = t - 1;
    Ok(out)
}

/// Counter-based Gaussian noise: one independent stream per step.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSource {
    seed: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn gaussian(&self, stream: u64, shape: (usize, usize, usize)) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    }
}

/// Terminal latent plus the per-step noise maps that replay to the source.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionRecord {
    pub terminal: LatentGrid,
    /// `noise_maps[t - 1]` is injected at step `t`.
    pub noise_maps: Vec<LatentGrid>,
    pub prompt: String,
    pub seed: u64,
    pub eta: f64,
}

impl InversionRecord {
    pub fn num_steps(&self) -> usize {
        self.noise_maps.len()
    }
}

/// Edit-friendly DDPM inversion.
///
/// Draws independent noisy versions `x_t` of `x0` for every step, then solves
/// each update for the noise map that carries the replayed latent onto
/// `x_{t-1}`. The replay trajectory is tracked during the solve so replaying
/// the record follows the same floating-point path.
pub fn invert<F>(
    x0: &LatentGrid,
    schedule: &DiffusionSchedule,
    prompt: &str,
    seed: u64,
    eta: f64,
    mut predict: F,
) -> Result<InversionRecord>
where
    F: FnMut(&LatentGrid, usize) -> Result<LatentGrid>,
{
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::config(format!(
            "inversion requires eta in (0, 1], got {eta}"
        )));
    }
    let steps = schedule.num_steps();
    let shape = x0.shape();
    let noise = NoiseSource::new(seed);

    // aux[t] for t = 0..=T, aux[0] = x0
    let mut aux = Vec::with_capacity(steps + 1);
    aux.push(x0.data.clone());
    for t in 1..=steps {
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let eta_t = noise.gaussian(t as u64, shape);
        let xt = Zip::from(&x0.data)
            .and(&eta_t)
            .map_collect(|&x, &n| (a * x as f64 + b * n as f64) as f32);
        aux.push(xt);
    }

    let terminal = LatentGrid {
        data: aux[steps].clone(),
        timestep_index: steps,
    };
    let mut noise_maps = vec![LatentGrid::zeros(shape.0, shape.1, shape.2); steps];
    let mut current = terminal.clone();
    for t in (1..=steps).rev() {
        let sigma = schedule.sigma(t, eta);
        if sigma <= 0.0 {
            return Err(Error::InversionDegenerate { step: t });
        }
        let eps = predict(&current, t)?;
        current.check_same_shape(&eps, "denoiser output")?;
        let mean = step_mean(
            &current,
            &eps,
            schedule.alpha_bar(t),
            schedule.alpha_bar_prev(t),
            sigma,
        );
        let z = Zip::from(&aux[t - 1])
            .and(&mean)
            .map_collect(|&target, &m| ((target as f64 - m) / sigma) as f32);
        let z = LatentGrid {
            data: z,
            timestep_index: t,
        };
        current = sampling_step(&current, &eps, t, schedule, Some(&z), eta)?;
        noise_maps[t - 1] = z;
    }

    Ok(InversionRecord {
        terminal,
        noise_maps,
        prompt: prompt.to_string(),
        seed,
        eta,
    })
}

/// Replays a record with unmodified predictions.
pub fn replay<F>(
    record: &InversionRecord,
    schedule: &DiffusionSchedule,
    mut predict: F,
) -> Result<LatentGrid>
where
    F: FnMut(&LatentGrid, usize) -> Result<LatentGrid>,
{
    if record.num_steps() != schedule.num_steps() {
        return Err(Error::config(format!(
            "record has {} steps, schedule has {}",
            record.num_steps(),
            schedule.num_steps()
        )));
    }
    let mut x = record.terminal.clone();
    for t in (1..=schedule.num_steps()).rev() {
        let eps = predict(&x, t)?;
        x = sampling_step(&x, &eps, t, schedule, Some(&record.noise_maps[t - 1]), record.eta)?;
    }
    Ok(x)
}
