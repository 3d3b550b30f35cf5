use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::ops::{FlatOpKind, HeadKind, SeqOpKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum MacroMode {
    #[default]
    Mixed,
    FlatOnly,
    SeqOnly,
    /// Both paths, but the flat forecast is not fed to the decoder.
    Parallel,
    /// Both paths summed with unit weights.
    NoWeights,
}

impl MacroMode {
    pub fn has_flat(self) -> bool {
        self != MacroMode::SeqOnly
    }

    pub fn has_seq(self) -> bool {
        self != MacroMode::FlatOnly
    }

    /// Whether the decoder input receives the flat forecast.
    pub fn routes_flat(self) -> bool {
        matches!(self, MacroMode::Mixed | MacroMode::NoWeights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Big,
    #[default]
    Small,
}

/// Shape of the search space and of every model built from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub n_targets: usize,
    /// Known covariates per step (past and future).
    #[serde(default)]
    pub n_features: usize,
    pub size_class: SizeClass,
    pub d_model: usize,
    pub nbeats_width: usize,
    pub n_seq_cells: usize,
    pub n_flat_cells: usize,
    pub n_intermediate: usize,
    pub mode: MacroMode,
    pub linear_decoder_norm: bool,
    pub dropout: f64,
    pub ma_kernel: usize,
    pub tcn_kernel: usize,
    pub septcn_kernel: usize,
    pub n_heads: usize,
    pub revin_affine: bool,
    pub seq_candidates: Vec<SeqOpKind>,
    pub flat_candidates: Vec<FlatOpKind>,
    pub head_candidates: Vec<HeadKind>,
}

impl NetworkConfig {
    /// Desk-scale defaults for a size class.
    pub fn new(lookback: usize, horizon: usize, n_targets: usize, size_class: SizeClass) -> Self {
        let (d_model, nbeats_width, norm) = match size_class {
            SizeClass::Big => (32, 256, false),
            SizeClass::Small => (8, 96, true),
        };
        NetworkConfig {
            lookback,
            horizon,
            n_targets,
            n_features: 0,
            size_class,
            d_model,
            nbeats_width,
            n_seq_cells: 2,
            n_flat_cells: 2,
            n_intermediate: 2,
            mode: MacroMode::Mixed,
            linear_decoder_norm: norm,
            dropout: 0.1,
            ma_kernel: 25,
            tcn_kernel: 3,
            septcn_kernel: 5,
            n_heads: 2,
            revin_affine: true,
            seq_candidates: SeqOpKind::ALL.to_vec(),
            flat_candidates: FlatOpKind::ALL.to_vec(),
            head_candidates: HeadKind::ALL.to_vec(),
        }
    }

    /// A deliberately small space for tests: d_model 4, narrow N-BEATS.
    pub fn tiny(lookback: usize, horizon: usize, n_targets: usize) -> Self {
        NetworkConfig {
            d_model: 4,
            nbeats_width: 8,
            ma_kernel: 3,
            ..Self::new(lookback, horizon, n_targets, SizeClass::Small)
        }
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        NetworkConfig { horizon, ..self.clone() }
    }

    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                p.push(msg.to_string())
            }
        };
        need(self.lookback > 0, "lookback must be positive");
        need(self.horizon > 0, "horizon must be positive");
        need(self.n_targets > 0, "n_targets must be positive");
        need(self.n_intermediate >= 1, "n_intermediate must be at least 1");
        need(self.d_model > 0, "d_model must be positive");
        need(self.nbeats_width > 0, "nbeats_width must be positive");
        need((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)");
        need(self.ma_kernel % 2 == 1, "ma_kernel must be odd");
        need(self.tcn_kernel >= 1 && self.septcn_kernel >= 1, "conv kernels must be positive");
        need(self.n_heads >= 1 && self.d_model % self.n_heads.max(1) == 0, "d_model must be divisible by n_heads");
        if self.mode.has_seq() {
            need(self.n_seq_cells >= 1, "seq modes need n_seq_cells >= 1");
            need(!self.seq_candidates.is_empty(), "seq_candidates must not be empty");
            need(!self.head_candidates.is_empty(), "head_candidates must not be empty");
        }
        if self.mode.has_flat() {
            need(self.n_flat_cells >= 1, "flat modes need n_flat_cells >= 1");
            need(!self.flat_candidates.is_empty(), "flat_candidates must not be empty");
        }
        let dup = |v: Vec<String>| {
            let mut s = v.clone();
            s.sort();
            s.dedup();
            s.len() != v.len()
        };
        need(!dup(self.seq_candidates.iter().map(|k| k.name().into()).collect()), "duplicate seq candidate");
        need(!dup(self.flat_candidates.iter().map(|k| k.name().into()).collect()), "duplicate flat candidate");
        need(!dup(self.head_candidates.iter().map(|k| k.name().into()).collect()), "duplicate head candidate");
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CoreError::config(p.join("; ")))
        }
    }

    /// Number of Fourier harmonics of the seasonal N-BEATS basis.
    pub fn harmonics(&self) -> usize {
        (self.horizon / 2).clamp(1, 8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_class_presets() {
        let b = NetworkConfig::new(96, 24, 321, SizeClass::Big);
        assert_eq!((b.d_model, b.nbeats_width, b.linear_decoder_norm), (32, 256, false));
        let s = NetworkConfig::new(96, 24, 7, SizeClass::Small);
        assert_eq!((s.d_model, s.nbeats_width, s.linear_decoder_norm), (8, 96, true));
        assert_eq!((s.n_seq_cells, s.n_flat_cells), (2, 2));
    }

    #[test]
    fn zero_intermediate_is_rejected() {
        let mut c = NetworkConfig::tiny(8, 4, 2);
        c.n_intermediate = 0;
        c.ma_kernel = 4;
        let p = c.problems();
        assert_eq!(p.len(), 2, "{p:?}");
        assert!(c.validate().unwrap_err().to_string().contains("n_intermediate"));
    }
}
