//! Candidate operations, heads and the input transforms around them.

pub mod decomp;
pub mod flat;
pub mod head;
pub mod revin;
pub mod seq;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SeqOpKind {
    TSMixer,
    LSTM,
    GRU,
    Transformer,
    TCN,
    SepTCN,
    Skip,
}

impl SeqOpKind {
    pub const ALL: [SeqOpKind; 7] = [
        SeqOpKind::TSMixer,
        SeqOpKind::LSTM,
        SeqOpKind::GRU,
        SeqOpKind::Transformer,
        SeqOpKind::TCN,
        SeqOpKind::SepTCN,
        SeqOpKind::Skip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SeqOpKind::TSMixer => "TSMixer",
            SeqOpKind::LSTM => "LSTM",
            SeqOpKind::GRU => "GRU",
            SeqOpKind::Transformer => "Transformer",
            SeqOpKind::TCN => "TCN",
            SeqOpKind::SepTCN => "SepTCN",
            SeqOpKind::Skip => "Skip",
        }
    }

    /// Parameter-name segment.
    pub fn slug(self) -> &'static str {
        match self {
            SeqOpKind::TSMixer => "tsmixer",
            SeqOpKind::LSTM => "lstm",
            SeqOpKind::GRU => "gru",
            SeqOpKind::Transformer => "transformer",
            SeqOpKind::TCN => "tcn",
            SeqOpKind::SepTCN => "septcn",
            SeqOpKind::Skip => "skip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FlatOpKind {
    Linear,
    NBeatsGeneric,
    NBeatsTrend,
    NBeatsSeasonal,
    Skip,
}

impl FlatOpKind {
    pub const ALL: [FlatOpKind; 5] = [
        FlatOpKind::Linear,
        FlatOpKind::NBeatsGeneric,
        FlatOpKind::NBeatsTrend,
        FlatOpKind::NBeatsSeasonal,
        FlatOpKind::Skip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlatOpKind::Linear => "Linear",
            FlatOpKind::NBeatsGeneric => "NBeatsGeneric",
            FlatOpKind::NBeatsTrend => "NBeatsTrend",
            FlatOpKind::NBeatsSeasonal => "NBeatsSeasonal",
            FlatOpKind::Skip => "Skip",
        }
    }

    pub fn is_nbeats(self) -> bool {
        matches!(self, FlatOpKind::NBeatsGeneric | FlatOpKind::NBeatsTrend | FlatOpKind::NBeatsSeasonal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HeadKind {
    Quantile,
    MSE,
    MAE,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Quantile, HeadKind::MSE, HeadKind::MAE];
    pub const QUANTILES: [f64; 3] = [0.1, 0.5, 0.9];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Quantile => "Quantile",
            HeadKind::MSE => "MSE",
            HeadKind::MAE => "MAE",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            HeadKind::Quantile => "quantile",
            HeadKind::MSE => "mse",
            HeadKind::MAE => "mae",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoderKind {
    SeqDecoder,
    LinearDecoder,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 2] = [DecoderKind::SeqDecoder, DecoderKind::LinearDecoder];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::SeqDecoder => "SeqDecoder",
            DecoderKind::LinearDecoder => "LinearDecoder",
        }
    }
}
