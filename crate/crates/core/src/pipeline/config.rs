//! Transfer hyperparameters and their flat `key = value` text form.
//!
//! ```text
//! # comments and blank lines are ignored
//! num_steps = 100
//! injection_window_32 = 10..70
//! structure_injection_period = 5     # or "none"
//! ```
//!
//! Windows are `lo..hi` over denoising iterations, half-open, where
//! iteration 0 is the first step (from the noisiest latent).

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::attention::DEFAULT_CONTRAST_BETA;
use crate::backbone::domain_prompt;
use crate::error::{Error, Result};
use crate::guidance::DEFAULT_GUIDANCE_ALPHA;
use crate::latent::ADAIN_EPSILON;

/// Half-open iteration range `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepWindow {
    pub lo: usize,
    pub hi: usize,
}

impl StepWindow {
    pub const EMPTY: StepWindow = StepWindow { lo: 0, hi: 0 };

    pub const fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.lo <= i && i < self.hi
    }

    pub fn is_empty(&self) -> bool {
        self.lo >= self.hi
    }
}

impl fmt::Display for StepWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.lo, self.hi)
    }
}

impl FromStr for StepWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("window '{s}' is not of the form lo..hi"));
        let (lo, hi) = s.split_once("..").ok_or_else(bad)?;
        let lo = lo.trim().parse().map_err(|_| bad())?;
        let hi = hi.trim().parse().map_err(|_| bad())?;
        Ok(Self { lo, hi })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    pub num_steps: usize,
    /// Iterations during which 32×32 decoder layers use cross-image attention.
    pub injection_window_32: StepWindow,
    pub injection_window_64: StepWindow,
    pub contrast_beta: f32,
    pub guidance_alpha: f32,
    pub adain_window: StepWindow,
    /// `None` disables structure injection.
    pub structure_injection_period: Option<usize>,
    pub domain: String,
    pub seed: u64,
    pub use_masks: bool,
    pub eta: f64,
    /// Forwarded to backbones with their own text guidance.
    pub text_guidance_scale: f32,
    pub adain_epsilon: f32,
    /// Appearance-branch drift above this raises a warning.
    pub drift_tolerance: f32,
    /// Record head-averaged cross-image attention maps for export.
    pub capture_attention: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            num_steps: 100,
            injection_window_32: StepWindow::new(10, 70),
            injection_window_64: StepWindow::new(10, 90),
            contrast_beta: DEFAULT_CONTRAST_BETA,
            guidance_alpha: DEFAULT_GUIDANCE_ALPHA,
            adain_window: StepWindow::new(20, 100),
            structure_injection_period: Some(5),
            domain: "object".into(),
            seed: 0,
            use_masks: false,
            eta: 1.0,
            text_guidance_scale: 1.0,
            adain_epsilon: ADAIN_EPSILON,
            drift_tolerance: 1e-4,
            capture_attention: false,
        }
    }
}

const KEYS: &[&str] = &[
    "num_steps",
    "injection_window_32",
    "injection_window_64",
    "contrast_beta",
    "guidance_alpha",
    "adain_window",
    "structure_injection_period",
    "domain",
    "seed",
    "use_masks",
    "eta",
    "text_guidance_scale",
    "adain_epsilon",
    "drift_tolerance",
    "capture_attention",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("invalid value '{value}' for '{key}'"))),
    }
}

impl TransferConfig {
    pub fn prompt(&self) -> String {
        domain_prompt(&self.domain)
    }

    /// Every mechanism off: plain reconstruction of the structure image.
    pub fn disabled(mut self) -> Self {
        self.injection_window_32 = StepWindow::EMPTY;
        self.injection_window_64 = StepWindow::EMPTY;
        self.contrast_beta = 1.0;
        self.guidance_alpha = 0.0;
        self.adain_window = StepWindow::EMPTY;
        self.structure_injection_period = None;
        self
    }

    /// Plain key/value swapping inside the windows: no contrast, no AdaIN,
    /// and the cross-image prediction used unguided.
    pub fn kv_swap_baseline(mut self) -> Self {
        self.contrast_beta = 1.0;
        self.guidance_alpha = 1.0;
        self.adain_window = StepWindow::EMPTY;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::config("num_steps must be at least 1"));
        }
        for (name, w) in [
            ("injection_window_32", self.injection_window_32),
            ("injection_window_64", self.injection_window_64),
            ("adain_window", self.adain_window),
        ] {
            if w.lo > w.hi || w.hi > self.num_steps {
                return Err(Error::config(format!(
                    "{name} {w} must satisfy lo <= hi <= num_steps ({})",
                    self.num_steps
                )));
            }
        }
        if self.structure_injection_period == Some(0) {
            return Err(Error::config("structure_injection_period must be at least 1"));
        }
        if !(self.contrast_beta >= 0.0) || !self.contrast_beta.is_finite() {
            return Err(Error::config(format!(
                "contrast_beta must be finite and >= 0, got {}",
                self.contrast_beta
            )));
        }
        if !self.guidance_alpha.is_finite() {
            return Err(Error::config("guidance_alpha must be finite"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config(format!("eta must be in (0, 1], got {}", self.eta)));
        }
        if !(self.adain_epsilon > 0.0) {
            return Err(Error::config("adain_epsilon must be > 0"));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "num_steps" => self.num_steps = parse(key, value)?,
            "injection_window_32" => self.injection_window_32 = value.parse()?,
            "injection_window_64" => self.injection_window_64 = value.parse()?,
            "contrast_beta" => self.contrast_beta = parse(key, value)?,
            "guidance_alpha" => self.guidance_alpha = parse(key, value)?,
            "adain_window" => self.adain_window = value.parse()?,
            "structure_injection_period" => {
                self.structure_injection_period = match value {
                    "none" | "off" | "inf" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "domain" => self.domain = value.to_string(),
            "seed" => self.seed = parse(key, value)?,
            "use_masks" => self.use_masks = parse_bool(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "text_guidance_scale" => self.text_guidance_scale = parse(key, value)?,
            "adain_epsilon" => self.adain_epsilon = parse(key, value)?,
            "drift_tolerance" => self.drift_tolerance = parse(key, value)?,
            "capture_attention" => self.capture_attention = parse_bool(key, value)?,
            other => {
                return Err(Error::config(format!(
                    "unknown key '{other}' (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses config text on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            config
                .set(key, value)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Every key with its resolved value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let period = match self.structure_injection_period {
            Some(p) => p.to_string(),
            None => "none".into(),
        };
        vec![
            ("num_steps", self.num_steps.to_string()),
            ("injection_window_32", self.injection_window_32.to_string()),
            ("injection_window_64", self.injection_window_64.to_string()),
            ("contrast_beta", self.contrast_beta.to_string()),
            ("guidance_alpha", self.guidance_alpha.to_string()),
            ("adain_window", self.adain_window.to_string()),
            ("structure_injection_period", period),
            ("domain", self.domain.clone()),
            ("seed", self.seed.to_string()),
            ("use_masks", self.use_masks.to_string()),
            ("eta", self.eta.to_string()),
            ("text_guidance_scale", self.text_guidance_scale.to_string()),
            ("adain_epsilon", self.adain_epsilon.to_string()),
            ("drift_tolerance", self.drift_tolerance.to_string()),
            ("capture_attention", self.capture_attention.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TransferConfig::default();
        assert_eq!(c.num_steps, 100);
        assert_eq!(c.injection_window_32, StepWindow::new(10, 70));
        assert_eq!(c.injection_window_64, StepWindow::new(10, 90));
        assert_eq!(c.contrast_beta, 1.67);
        assert_eq!(c.guidance_alpha, 3.5);
        assert_eq!(c.adain_window, StepWindow::new(20, 100));
        assert_eq!(c.structure_injection_period, Some(5));
        assert_eq!(c.eta, 1.0);
        assert_eq!(c.prompt(), "A photo of a object");
        c.validate().unwrap();
    }

    #[test]
    fn text_roundtrip() {
        let mut c = TransferConfig::default();
        c.domain = "animal".into();
        c.structure_injection_period = None;
        c.seed = 42;
        c.contrast_beta = 2.25;
        assert_eq!(TransferConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = TransferConfig::parse(
            "# demo\n\nnum_steps = 20\ninjection_window_32 = 2..10  # early\ninjection_window_64 = 2..18\nadain_window = 4..20\nuse_masks = yes\n",
        )
        .unwrap();
        assert_eq!(c.num_steps, 20);
        assert_eq!(c.injection_window_32, StepWindow::new(2, 10));
        assert!(c.use_masks);
    }

    #[test]
    fn parse_rejects_bad_input() {
        for text in [
            "nonsense",
            "bogus_key = 1",
            "num_steps = many",
            "injection_window_32 = 10-70",
            "adain_window = 50..200",
            "injection_window_64 = 30..20",
            "structure_injection_period = 0",
            "contrast_beta = -1",
            "eta = 0",
            "num_steps = 0",
        ] {
            assert!(
                matches!(TransferConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn windows() {
        let w = StepWindow::new(10, 70);
        assert!(!w.contains(9) && w.contains(10) && w.contains(69) && !w.contains(70));
        assert!(StepWindow::EMPTY.is_empty());
        assert!(!StepWindow::EMPTY.contains(0));
    }
}
