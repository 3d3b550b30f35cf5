use std::time::Instant;

use serde::{Deserialize, Serialize};
use tsnas_tensor::optim::{clip_grad_norm, Adam, AdamConfig};
use tsnas_tensor::rng::{next_seed, seeded};
use tsnas_tensor::{init, memory, Element, ParamRole, ParamStore, Tape};

use crate::data::{chrono_split, SplitPurpose, Standardizer, TimeSeriesDataset, Windows};
use crate::error::{CoreError, Result};
use crate::genotype::Genotype;
use crate::network::{Batch, Network};
use crate::nn::Ctx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub stride: usize,
    pub max_steps_per_epoch: Option<usize>,
    /// Window stride for validation and test metrics.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            patience: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            grad_clip: 5.0,
            stride: 1,
            max_steps_per_epoch: None,
            eval_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stride == 0 || self.eval_stride == 0 {
            return Err(CoreError::config("train.batch_size, train.stride and train.eval_stride must be positive"));
        }
        if self.patience == 0 {
            return Err(CoreError::config("train.patience must be at least 1"));
        }
        Ok(())
    }
}

/// A dataset standardised with train-range statistics, plus its final split.
#[derive(Debug, Clone)]
pub struct FinalData {
    pub ds: TimeSeriesDataset,
    pub scaler: Standardizer,
    pub train: std::ops::Range<usize>,
    pub val: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

impl FinalData {
    pub fn new(raw: &TimeSeriesDataset, ratios: [f64; 3], l: usize, h: usize) -> Result<Self> {
        let r = chrono_split(raw.len(), SplitPurpose::Final, ratios, l, h)?;
        let scaler = Standardizer::fit(raw, r[0].clone())?;
        Ok(FinalData { ds: scaler.apply(raw), scaler, train: r[0].clone(), val: r[1].clone(), test: r[2].clone() })
    }

    pub fn windows(&self, range: std::ops::Range<usize>, l: usize, h: usize, stride: usize) -> Result<Windows<'_>> {
        Windows::new(&self.ds, range, l, h, stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

fn accumulate(pred: &[f64], truth: &[f64], se: &mut f64, ae: &mut f64) {
    for (p, y) in pred.iter().zip(truth) {
        *se += (p - y).powi(2);
        *ae += (p - y).abs();
    }
}

/// MSE/MAE over every window, step and target, in the dataset's (globally standardised) units.
pub fn evaluate<T: Element>(net: &Network<T>, windows: &Windows, batch_size: usize) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(CoreError::contract("evaluation set holds no window"));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for b in windows.batches::<T>(batch_size, None) {
        let tape = Tape::no_grad();
        let out = net.forward(&Ctx::eval(&tape, &net.store), &b)?;
        let p = out.point.value().to_f64_vec();
        let y = b.future.to_f64_vec();
        accumulate(&p, &y, &mut se, &mut ae);
        n += y.len();
    }
    Ok(Metrics { mse: se / n as f64, mae: ae / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub repeat_last: Metrics,
    pub seasonal_naive: Metrics,
    pub period: usize,
}

/// Repeat-last-value and seasonal-naive (copy the last `period` steps) forecasts.
pub fn naive_baselines(windows: &Windows, period: usize) -> Result<Baselines> {
    if windows.is_empty() {
        return Err(CoreError::contract("evaluation set holds no window"));
    }
    let (l, h) = (windows.lookback, windows.horizon);
    if period == 0 || period > l {
        return Err(CoreError::config(format!("seasonal period {period} must lie in 1..={l}")));
    }
    let ds = windows.ds;
    let targets = ds.targets();
    let (mut rl, mut sn) = ((0.0, 0.0), (0.0, 0.0));
    let mut n = 0usize;
    for &s in &windows.starts {
        for step in 0..h {
            let t = s + l + step;
            for &c in &targets {
                let y = ds.get(t, c);
                let last = ds.get(s + l - 1, c);
                let seasonal = ds.get(s + l - period + step % period, c);
                rl.0 += (last - y).powi(2);
                rl.1 += (last - y).abs();
                sn.0 += (seasonal - y).powi(2);
                sn.1 += (seasonal - y).abs();
                n += 1;
            }
        }
    }
    let m = |(se, ae): (f64, f64)| Metrics { mse: se / n as f64, mae: ae / n as f64 };
    Ok(Baselines { repeat_last: m(rl), seasonal_naive: m(sn), period })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    pub epochs: Vec<TrainEpoch>,
    /// 1-based epoch restored before testing; `None` for the untrained model.
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
    pub test_mse: f64,
    pub test_mae: f64,
    pub params: usize,
    pub wallclock_s: f64,
    pub genotype_hash: String,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<String>,
}

fn snapshot<T: Element>(s: &ParamStore<T>) -> ParamStore<T> {
    let mut c = s.clone();
    c.zero_grads();
    c
}

/// Fresh initialisation, Adam with early stopping on validation MSE, test metrics once on the best model.
pub fn train_genotype<T: Element>(
    g: &Genotype,
    data: &FinalData,
    cfg: &TrainConfig,
    seed: u64,
    dataset: &str,
) -> Result<(TrainReport, Network<T>)> {
    cfg.validate()?;
    g.validate()?;
    let started = Instant::now();
    let mut net = Network::<T>::from_genotype(g, seed)?;
    let (l, h) = (net.cfg.lookback, net.cfg.horizon);
    let train = data.windows(data.train.clone(), l, h, cfg.stride)?;
    let val = data.windows(data.val.clone(), l, h, cfg.eval_stride)?;
    let test = data.windows(data.test.clone(), l, h, cfg.eval_stride)?;
    if train.is_empty() {
        return Err(CoreError::config("training split holds no window"));
    }
    let mut opt = Adam::<T>::new(AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() });
    let mut rng = seeded(seed ^ 0x7EA1);
    let mut epochs = Vec::new();
    let mut best_val = evaluate(&net, &val, cfg.batch_size)?.mse;
    let mut best: (Option<usize>, ParamStore<T>) = (None, snapshot(&net.store));
    let mut since_best = 0;
    let mut diverged = None;
    'outer: for epoch in 1..=cfg.epochs {
        let batches: Vec<Batch<T>> = train.batches(cfg.batch_size, Some(&mut rng));
        let steps = cfg.max_steps_per_epoch.map_or(batches.len(), |m| m.min(batches.len()).max(1));
        let mut total = 0.0;
        for b in &batches[..steps] {
            let tape = Tape::new();
            let s = next_seed(&mut rng);
            let loss = {
                let ctx = Ctx::new(&tape, &net.store, true, None, s);
                net.forward(&ctx, b)?.loss
            };
            let v = loss.value().item().to_f64().unwrap_or(f64::NAN);
            if !v.is_finite() {
                diverged = Some(format!("epoch {epoch}: training loss is {v}"));
                break 'outer;
            }
            total += v;
            let grads = tape.backward(&loss)?;
            net.store.zero_grads();
            net.store.accumulate(&grads);
            let ids = net.store.ids_with_grad(Some(ParamRole::Weight));
            clip_grad_norm(&mut net.store, &ids, cfg.grad_clip);
            opt.step(&mut net.store, &ids)?;
        }
        let vm = evaluate(&net, &val, cfg.batch_size)?.mse;
        epochs.push(TrainEpoch { epoch, train_loss: total / steps as f64, val_mse: vm });
        if !vm.is_finite() {
            diverged = Some(format!("epoch {epoch}: validation MSE is {vm}"));
            break;
        }
        if vm < best_val {
            best_val = vm;
            best = (Some(epoch), snapshot(&net.store));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    net.store = best.1;
    let tm = evaluate(&net, &test, cfg.batch_size)?;
    let report = TrainReport {
        dataset: dataset.to_string(),
        horizon: h,
        seed,
        epochs,
        best_epoch: best.0,
        best_val_mse: best_val,
        test_mse: tm.mse,
        test_mae: tm.mae,
        params: net.param_count(),
        wallclock_s: started.elapsed().as_secs_f64(),
        genotype_hash: g.hash(),
        diverged,
    };
    Ok((report, net))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub params: usize,
    pub forward_ms: f64,
    pub forward_backward_ms: f64,
    pub peak_bytes: usize,
    pub batch: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub n_targets: usize,
    pub repetitions: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Timing and memory of `net` on random input of batch size `b`; medians over `reps`.
pub fn profile<T: Element>(net: &Network<T>, b: usize, reps: usize) -> Result<ProfileReport> {
    if reps < 3 {
        return Err(CoreError::config("profiling needs at least 3 repetitions"));
    }
    let c = &net.cfg;
    let mut rng = seeded(0xF00D);
    let feats = |len: usize, rng: &mut _| (c.n_features > 0).then(|| init::uniform(&[b, len, c.n_features], 1.0, rng));
    let batch = Batch {
        past: init::uniform(&[b, c.lookback, c.n_targets], 1.0, &mut rng),
        future: init::uniform(&[b, c.horizon, c.n_targets], 1.0, &mut rng),
        past_feats: feats(c.lookback, &mut rng),
        future_feats: feats(c.horizon, &mut rng),
        starts: (0..b).collect(),
    };
    let mut fwd = Vec::with_capacity(reps);
    let mut both = Vec::with_capacity(reps);
    let mut peak = 0;
    for _ in 0..reps {
        let t0 = Instant::now();
        {
            let tape = Tape::no_grad();
            net.forward(&Ctx::eval(&tape, &net.store), &batch)?;
        }
        fwd.push(t0.elapsed().as_secs_f64() * 1e3);
        let base = memory::live_bytes();
        memory::reset_peak();
        let t0 = Instant::now();
        {
            let tape = Tape::new();
            let out = net.forward(&Ctx::new(&tape, &net.store, true, None, 1), &batch)?;
            tape.backward(&out.loss)?;
        }
        both.push(t0.elapsed().as_secs_f64() * 1e3);
        peak = peak.max(memory::peak_bytes().saturating_sub(base));
    }
    Ok(ProfileReport {
        params: net.param_count(),
        forward_ms: median(fwd),
        forward_backward_ms: median(both),
        peak_bytes: peak,
        batch: b,
        lookback: c.lookback,
        horizon: c.horizon,
        n_targets: c.n_targets,
        repetitions: reps,
    })
}

/// The genotype's architecture rebuilt at another look-back / horizon.
pub fn at_geometry(g: &Genotype, l: usize, h: usize) -> Genotype {
    let mut g = g.clone();
    g.search_space.lookback = l;
    g.search_space.horizon = h;
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind, FINAL_RATIOS};

    #[test]
    fn baseline_closed_forms() {
        let ds = make_synthetic(SyntheticKind::Trend, 40, 1, 0.0, 0);
        let w = Windows::new(&ds, 0..40, 8, 4, 1).unwrap();
        let b = naive_baselines(&w, 4).unwrap();
        assert!((b.repeat_last.mse - (1.0 + 4.0 + 9.0 + 16.0) / 4.0).abs() < 1e-12);
        let flat = TimeSeriesDataset::new(vec![2.5; 30], vec!["c".into()]).unwrap();
        let w = Windows::new(&flat, 0..30, 8, 4, 1).unwrap();
        assert_eq!(naive_baselines(&w, 8).unwrap().repeat_last.mse, 0.0);
        let per: Vec<f64> = (0..48).map(|i| (std::f64::consts::TAU * i as f64 / 6.0).sin()).collect();
        let sine = TimeSeriesDataset::new(per, vec!["s".into()]).unwrap();
        let w = Windows::new(&sine, 0..48, 12, 6, 1).unwrap();
        assert!(naive_baselines(&w, 6).unwrap().seasonal_naive.mse < 1e-20);
    }

    #[test]
    fn standardisation_uses_train_only() {
        let ds = make_synthetic(SyntheticKind::Trend, 100, 2, 0.0, 0);
        let fd = FinalData::new(&ds, FINAL_RATIOS, 4, 4).unwrap();
        let col = ds.column(0);
        let m = col[..70].iter().sum::<f64>() / 70.0;
        assert!((fd.scaler.mean[0] - m).abs() < 1e-12);
        let tr = fd.ds.column(0)[..70].iter().sum::<f64>() / 70.0;
        assert!(tr.abs() < 1e-12);
    }
}
