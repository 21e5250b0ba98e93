//! Level thresholds, in-level noise schedules and loss weights.

use crate::error::{Error, Result};

pub const DEFAULT_CLIP_CAP: f64 = 10.0;
pub const DEFAULT_DENOM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleFamily {
    /// `α = (t_{h+1} - t) / (t_{h+1} - t_h)` inside each level.
    Linear,
}

/// In-level schedule evaluated at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaEval {
    pub level: usize,
    pub alpha: f64,
    pub dalpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeWeight {
    /// Weight used for ELBO evaluation.
    pub raw: f64,
    /// Weight used for training, `min(raw, clip_cap)`.
    pub clipped: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    thresholds: Vec<f64>,
    family: ScheduleFamily,
    clip_cap: f64,
    denom_floor: f64,
}

/// Uniformly spaced level thresholds `t_h = h / H`.
pub fn thresholds(height: usize) -> Result<Vec<f64>> {
    if height == 0 {
        return Err(Error::InvalidConfig(
            "a schedule needs at least one level (H >= 1)".into(),
        ));
    }
    let mut t: Vec<f64> = (0..=height).map(|h| h as f64 / height as f64).collect();
    t[height] = 1.0;
    Ok(t)
}

impl NoiseSchedule {
    pub fn uniform(height: usize) -> Result<Self> {
        Ok(Self {
            thresholds: thresholds(height)?,
            family: ScheduleFamily::Linear,
            clip_cap: DEFAULT_CLIP_CAP,
            denom_floor: DEFAULT_DENOM_FLOOR,
        })
    }

    /// Custom thresholds; must start at 0, end at 1, and increase strictly.
    pub fn with_thresholds(thresholds: Vec<f64>) -> Result<Self> {
        let ok = thresholds.len() >= 2
            && thresholds[0] == 0.0
            && *thresholds.last().unwrap() == 1.0
            && thresholds.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "thresholds must satisfy 0 = t_0 < ... < t_H = 1, got {thresholds:?}"
            )));
        }
        Ok(Self {
            thresholds,
            family: ScheduleFamily::Linear,
            clip_cap: DEFAULT_CLIP_CAP,
            denom_floor: DEFAULT_DENOM_FLOOR,
        })
    }

    pub fn with_clip_cap(mut self, cap: f64) -> Result<Self> {
        if cap.is_nan() || cap <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "clip cap must be positive, got {cap}"
            )));
        }
        self.clip_cap = cap;
        Ok(self)
    }

    pub fn with_denom_floor(mut self, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "denominator floor must lie in (0, 1), got {floor}"
            )));
        }
        self.denom_floor = floor;
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.thresholds.len() - 1
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    pub fn clip_cap(&self) -> f64 {
        self.clip_cap
    }

    pub fn denom_floor(&self) -> f64 {
        self.denom_floor
    }

    /// Length `t_{h+1} - t_h` of level `h`.
    pub fn level_length(&self, h: usize) -> f64 {
        self.thresholds[h + 1] - self.thresholds[h]
    }

    /// `h` with `t ∈ [t_h, t_{h+1})`; `t = 1` belongs to the top level `H - 1`.
    pub fn level_of(&self, t: f64) -> usize {
        let h = self.thresholds.partition_point(|&th| th <= t);
        h.saturating_sub(1).min(self.height() - 1)
    }

    /// `α^h_t` for an explicit level; `t` is clamped into the level.
    pub fn alpha_in_level(&self, h: usize, t: f64) -> f64 {
        let (lo, hi) = (self.thresholds[h], self.thresholds[h + 1]);
        match self.family {
            ScheduleFamily::Linear => {
                let t = t.clamp(lo, hi);
                (hi - t) / (hi - lo)
            }
        }
    }

    pub fn dalpha_in_level(&self, h: usize, _t: f64) -> f64 {
        match self.family {
            ScheduleFamily::Linear => -1.0 / self.level_length(h),
        }
    }

    pub fn alpha(&self, t: f64) -> AlphaEval {
        let level = self.level_of(t);
        AlphaEval {
            level,
            alpha: self.alpha_in_level(level, t),
            dalpha: self.dalpha_in_level(level, t),
        }
    }

    /// Time weight `Δ_h · (-α') / max(1 - α, floor)` inside level `h`.
    pub fn time_weight_in_level(&self, h: usize, t: f64) -> TimeWeight {
        let alpha = self.alpha_in_level(h, t);
        let dalpha = self.dalpha_in_level(h, t);
        let raw = self.level_length(h) * (-dalpha) / (1.0 - alpha).max(self.denom_floor);
        TimeWeight {
            raw,
            clipped: raw.min(self.clip_cap),
        }
    }

    pub fn time_weight(&self, t: f64) -> TimeWeight {
        self.time_weight_in_level(self.level_of(t), t)
    }

    /// Time at which `α^h` reaches `alpha` (inverse of the in-level schedule).
    pub fn time_at_alpha(&self, h: usize, alpha: f64) -> f64 {
        let (lo, hi) = (self.thresholds[h], self.thresholds[h + 1]);
        match self.family {
            ScheduleFamily::Linear => hi - alpha.clamp(0.0, 1.0) * (hi - lo),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LevelWeightKind {
    #[default]
    None,
    Linear,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LevelWeightConfig {
    pub kind: LevelWeightKind,
    pub gamma: f64,
}

impl LevelWeightConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn linear(gamma: f64) -> Self {
        Self {
            kind: LevelWeightKind::Linear,
            gamma,
        }
    }

    pub fn exponential(gamma: f64) -> Self {
        Self {
            kind: LevelWeightKind::Exponential,
            gamma,
        }
    }

    /// Parses `none`, `linear:<γ>`/`lin:<γ>` or `exp:<γ>`/`exponential:<γ>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(Self::none());
        }
        let (kind, gamma) = s.split_once(':').ok_or_else(|| {
            Error::InvalidConfig(format!("level weights {s:?}: expected kind:gamma"))
        })?;
        let gamma: f64 = gamma
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("level weights {s:?}: bad gamma")))?;
        if gamma.is_nan() || gamma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "gamma must be >= 0, got {gamma}"
            )));
        }
        match kind {
            "linear" | "lin" => Ok(Self::linear(gamma)),
            "exp" | "exponential" => Ok(Self::exponential(gamma)),
            other => Err(Error::InvalidConfig(format!(
                "unknown level weight kind {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for LevelWeightConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            LevelWeightKind::None => write!(f, "none"),
            LevelWeightKind::Linear => write!(f, "linear:{}", self.gamma),
            LevelWeightKind::Exponential => write!(f, "exp:{}", self.gamma),
        }
    }
}

/// Per-level training multipliers, mean-normalized to 1.
pub fn height_weights(height: usize, cfg: LevelWeightConfig) -> Result<Vec<f64>> {
    if height == 0 {
        return Err(Error::InvalidConfig("height weights need H >= 1".into()));
    }
    let raw: Vec<f64> = (0..height)
        .map(|beta| {
            let b = beta as f64;
            match cfg.kind {
                LevelWeightKind::None => 1.0,
                LevelWeightKind::Exponential => (cfg.gamma * b).exp(),
                // H = 1 would divide by zero; the single level keeps weight 1.
                LevelWeightKind::Linear if height == 1 => 1.0,
                LevelWeightKind::Linear => 1.0 + cfg.gamma * b / (height - 1) as f64,
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / height as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_thresholds() {
        assert_eq!(thresholds(2).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(thresholds(1).unwrap(), vec![0.0, 1.0]);
        assert_eq!(thresholds(4).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(thresholds(0).is_err());
    }

    #[test]
    fn level_of_edges() {
        let s = NoiseSchedule::uniform(2).unwrap();
        assert_eq!(s.level_of(0.0), 0);
        assert_eq!(s.level_of(1.0), 1);
        assert_eq!(s.level_of(0.75), 1);
        assert_eq!(s.level_of(0.5), 1);
        assert_eq!(s.level_of(0.4999999), 0);
    }

    #[test]
    fn alpha_endpoints_exact() {
        let s = NoiseSchedule::uniform(3).unwrap();
        for h in 0..3 {
            let th = s.thresholds();
            assert_eq!(s.alpha_in_level(h, th[h]), 1.0);
            assert_eq!(s.alpha_in_level(h, th[h + 1]), 0.0);
        }
        let s2 = NoiseSchedule::uniform(2).unwrap();
        let a = s2.alpha(0.25);
        assert_eq!(a.level, 0);
        assert!((a.alpha - 0.5).abs() < 1e-15);
        assert!((a.dalpha + 2.0).abs() < 1e-15);
    }

    #[test]
    fn time_weight_examples() {
        let s = NoiseSchedule::uniform(2).unwrap();
        let mid = s.time_weight(0.25);
        assert!((mid.raw - 2.0).abs() < 1e-12);
        let end = s.time_weight_in_level(0, 0.5);
        assert!((end.raw - 1.0).abs() < 1e-12);
        let near = s.time_weight(1e-6 * 0.5);
        assert!((near.raw - 1e4).abs() < 1e-6);
        assert_eq!(near.clipped, 10.0);
        let s2 = s.clone().with_clip_cap(2.0).unwrap();
        assert_eq!(s2.time_weight(1e-6).clipped, 2.0);
    }

    #[test]
    fn level_weight_examples() {
        assert_eq!(
            height_weights(4, LevelWeightConfig::none()).unwrap(),
            vec![1.0; 4]
        );
        let lin = height_weights(2, LevelWeightConfig::linear(1.0)).unwrap();
        assert!((lin[0] - 2.0 / 3.0).abs() < 1e-15 && (lin[1] - 4.0 / 3.0).abs() < 1e-15);
        let exp = height_weights(3, LevelWeightConfig::exponential(0.3)).unwrap();
        for (got, want) in exp.iter().zip([0.71912, 0.97071, 1.31030]) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        assert_eq!(
            height_weights(1, LevelWeightConfig::linear(2.0)).unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn parse_level_weights() {
        assert_eq!(
            LevelWeightConfig::parse("none").unwrap(),
            LevelWeightConfig::none()
        );
        assert_eq!(
            LevelWeightConfig::parse("linear:0.5").unwrap(),
            LevelWeightConfig::linear(0.5)
        );
        assert_eq!(
            LevelWeightConfig::parse("exp:0.3").unwrap(),
            LevelWeightConfig::exponential(0.3)
        );
        assert!(LevelWeightConfig::parse("cubic:1").is_err());
    }
}
