//! Stochastic branch noise predictor: a conditional 1D U-Net over the
//! label-window axis, plus the denoising objective.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, standard_normal, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::graph::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    #[default]
    Film,
    Add,
    Concat,
}

impl std::str::FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "film" => Ok(Conditioning::Film),
            "add" => Ok(Conditioning::Add),
            "concat" => Ok(Conditioning::Concat),
            _ => Err(Error::UnknownConditioning(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub conditioning: Conditioning,
    /// Channel width per U-Net level; each level after the first halves the length.
    pub widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub cond_dim: usize,
    /// Label channels of the window.
    pub channels: usize,
    /// Window length λ.
    pub window: usize,
}

impl DenoiserConfig {
    pub fn new(cond_dim: usize, channels: usize, window: usize) -> Self {
        Self { conditioning: Conditioning::Film, widths: vec![64, 128], time_embed_dim: 128, cond_dim, channels, window }
    }

    pub fn downsampling(&self) -> usize {
        1 << self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("U-Net widths must be non-empty and positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("timestep embedding size must be even and at least 2".into()));
        }
        if self.cond_dim == 0 || self.channels == 0 || self.window == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        if self.window % self.downsampling() != 0 {
            return Err(Error::Config(format!(
                "window length {} is not divisible by the U-Net downsampling factor {}",
                self.window,
                self.downsampling()
            )));
        }
        Ok(())
    }

    /// Values per sample, `channels * window`.
    pub fn sample_len(&self) -> usize {
        self.channels * self.window
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_init(&format!("{name}.weight"), vec![out, inp, KERNEL], inp * KERNEL, rng),
            bias: store.add_zeros(&format!("{name}.bias"), vec![out]),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        tape.conv1d(x, p.var(self.weight), p.var(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_init(&format!("{name}.weight"), vec![out, inp], inp, rng),
            bias: store.add_zeros(&format!("{name}.bias"), vec![out]),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        tape.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ResBlock {
    width: usize,
    conv1: Conv,
    conv2: Conv,
    modulation: Option<Dense>,
}

impl ResBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), width, width, rng);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), width, width, rng);
        let t = cfg.time_embed_dim;
        let modulation = match cfg.conditioning {
            Conditioning::Film => Some(Dense::new(store, &format!("{name}.film"), 2 * width, t, rng)),
            Conditioning::Add => Some(Dense::new(store, &format!("{name}.add"), width, t, rng)),
            Conditioning::Concat => None,
        };
        Self { width, conv1, conv2, modulation }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, h: Var, cond: Var, mode: Conditioning, modulate: bool) -> Var {
        let r = tape.silu(h);
        let mut r = self.conv1.apply(tape, p, r);
        if let (Some(m), true) = (self.modulation, modulate) {
            let v = m.apply(tape, p, cond);
            r = match mode {
                Conditioning::Film => {
                    let dg = tape.slice_cols(v, 0, self.width);
                    let gamma = tape.add_scalar(dg, 1.0);
                    let delta = tape.slice_cols(v, self.width, self.width);
                    tape.film(r, gamma, delta)
                }
                _ => tape.add_per_channel(r, v),
            };
        }
        let r = tape.silu(r);
        let r = self.conv2.apply(tape, p, r);
        tape.add(h, r)
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    time1: Dense,
    time2: Dense,
    cond_proj: Dense,
    conv_in: Conv,
    down: Vec<ResBlock>,
    down_convs: Vec<Conv>,
    mid: ResBlock,
    up_convs: Vec<Conv>,
    merges: Vec<Conv>,
    up: Vec<ResBlock>,
    conv_out: Conv,
    calls: Arc<AtomicUsize>,
}

impl Denoiser {
    pub fn new<R: Rng>(config: DenoiserConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let t = config.time_embed_dim;
        let w = config.widths.clone();
        let depth = w.len();
        let time1 = Dense::new(store, "denoiser.time.0", t, t, rng);
        let time2 = Dense::new(store, "denoiser.time.1", t, t, rng);
        let cond_proj = Dense::new(store, "denoiser.cond", t, config.cond_dim, rng);
        let input = match config.conditioning {
            Conditioning::Concat => config.channels + t,
            _ => config.channels,
        };
        let conv_in = Conv::new(store, "denoiser.input", w[0], input, rng);
        let mut down = Vec::new();
        let mut down_convs = Vec::new();
        for i in 0..depth {
            down.push(ResBlock::new(store, &format!("denoiser.down.{i}"), w[i], &config, rng));
            if i + 1 < depth {
                down_convs.push(Conv::new(store, &format!("denoiser.down.{i}.proj"), w[i + 1], w[i], rng));
            }
        }
        let mid = ResBlock::new(store, "denoiser.mid", w[depth - 1], &config, rng);
        let mut up_convs = Vec::new();
        let mut merges = Vec::new();
        let mut up = Vec::new();
        for i in 0..depth {
            if i + 1 < depth {
                up_convs.push(Conv::new(store, &format!("denoiser.up.{i}.proj"), w[i], w[i + 1], rng));
            }
            merges.push(Conv::new(store, &format!("denoiser.up.{i}.merge"), w[i], 2 * w[i], rng));
            up.push(ResBlock::new(store, &format!("denoiser.up.{i}"), w[i], &config, rng));
        }
        let conv_out = Conv::new(store, "denoiser.output", config.channels, w[0], rng);
        Ok(Self {
            config,
            time1,
            time2,
            cond_proj,
            conv_in,
            down,
            down_convs,
            mid,
            up_convs,
            merges,
            up,
            conv_out,
            calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Number of forward evaluations since construction or the last reset.
    pub fn invocations(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_invocations(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    /// Conditioning vector `(B, T)` from timesteps and features `(B, F)`.
    fn embedding(&self, tape: &mut Tape, p: &Bound, ks: &[usize], cond: Var) -> Var {
        let t = self.config.time_embed_dim;
        let sin = tape.constant(timestep_embedding(ks, t));
        let e = self.time1.apply(tape, p, sin);
        let e = tape.silu(e);
        let e = self.time2.apply(tape, p, e);
        let c = self.cond_proj.apply(tape, p, cond);
        tape.add(e, c)
    }

    /// Noise prediction `(B, C, λ)` for noisy windows `y` `(B, C, λ)`.
    pub fn forward_var(&self, tape: &mut Tape, p: &Bound, y: Var, ks: &[usize], cond: Var) -> Var {
        self.forward_impl(tape, p, y, ks, cond, true)
    }

    fn forward_impl(&self, tape: &mut Tape, p: &Bound, y: Var, ks: &[usize], cond: Var, modulate: bool) -> Var {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mode = self.config.conditioning;
        let len = tape.shape(y)[2];
        let emb = self.embedding(tape, p, ks, cond);
        let act = tape.silu(emb);
        let x = match mode {
            Conditioning::Concat => {
                let b = tape.broadcast_len(emb, len);
                tape.concat_channels(y, b)
            }
            _ => y,
        };
        let mut h = self.conv_in.apply(tape, p, x);
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, block) in self.down.iter().enumerate() {
            h = block.apply(tape, p, h, act, mode, modulate);
            skips.push(h);
            if let Some(proj) = self.down_convs.get(i) {
                h = tape.avg_pool2(h);
                h = proj.apply(tape, p, h);
            }
        }
        h = self.mid.apply(tape, p, h, act, mode, modulate);
        for i in (0..self.up.len()).rev() {
            if let Some(proj) = self.up_convs.get(i) {
                h = tape.upsample2(h);
                h = proj.apply(tape, p, h);
            }
            h = tape.concat_channels(h, skips[i]);
            h = self.merges[i].apply(tape, p, h);
            h = self.up[i].apply(tape, p, h, act, mode, modulate);
        }
        let h = tape.silu(h);
        self.conv_out.apply(tape, p, h)
    }

    /// `ε̂` for a batch: `ys` is `B` channel-major windows, `conds` is `B` feature rows.
    pub fn eps_predict_batch(&self, store: &ParamStore, ys: &[f64], ks: &[usize], conds: &[f64]) -> Result<Vec<f64>> {
        let b = ks.len();
        let (c, l, f) = (self.config.channels, self.config.window, self.config.cond_dim);
        if ys.len() != b * c * l || conds.len() != b * f {
            return Err(Error::Shape(format!("expected {b} windows of {c}x{l} and {b} conditions of {f}")));
        }
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let y = tape.constant(Tensor::new(vec![b, c, l], ys.to_vec()));
        let cv = tape.constant(Tensor::new(vec![b, f], conds.to_vec()));
        let out = self.forward_var(&mut tape, &p, y, ks, cv);
        Ok(tape.value(out).data().to_vec())
    }

    pub fn eps_predict(&self, store: &ParamStore, yk: &[f64], k: usize, c: &[f64]) -> Result<Vec<f64>> {
        self.eps_predict_batch(store, yk, &[k], c)
    }
}

/// Sinusoidal embedding `(B, dim)` of integer timesteps.
pub fn timestep_embedding(ks: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ks.len() * dim);
    for &k in ks {
        let freqs = (0..half).map(|j| (-(10000f64.ln()) * j as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| k as f64 * f).collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::new(vec![ks.len(), dim], data)
}

/// Timesteps and noise for a batch: one `(k, ε)` per sample, `k` uniform in `[1, K]`.
pub fn draw_noise<R: Rng>(batch: usize, sample_len: usize, sched: &DiffusionSchedule, rng: &mut R) -> (Vec<usize>, Vec<f64>) {
    let mut ks = Vec::with_capacity(batch);
    let mut eps = Vec::with_capacity(batch * sample_len);
    for _ in 0..batch {
        ks.push(rng.gen_range(1..=sched.steps()));
        eps.extend(standard_normal(sample_len, rng));
    }
    (ks, eps)
}

/// Denoising objective on a tape: mean squared error between `eps` and the
/// prediction at `q_sample(y0, k, eps)`. `y0` holds `B` channel-major windows.
pub fn ddpm_loss_var(
    denoiser: &Denoiser,
    tape: &mut Tape,
    p: &Bound,
    y0: &[f64],
    cond: Var,
    ks: &[usize],
    eps: &[f64],
    sched: &DiffusionSchedule,
) -> Result<Var> {
    let cfg = denoiser.config();
    let n = cfg.sample_len();
    let b = ks.len();
    if y0.len() != b * n || eps.len() != b * n {
        return Err(Error::Shape(format!("expected {b} windows of {n} values")));
    }
    let mut noisy = Vec::with_capacity(b * n);
    for (i, &k) in ks.iter().enumerate() {
        noisy.extend(q_sample(&y0[i * n..(i + 1) * n], k, &eps[i * n..(i + 1) * n], sched)?);
    }
    let y = tape.constant(Tensor::new(vec![b, cfg.channels, cfg.window], noisy));
    let pred = denoiser.forward_var(tape, p, y, ks, cond);
    Ok(tape.mse_mean(pred, eps))
}

/// Single-window objective with freshly drawn `(k, ε)`.
pub fn ddpm_loss<R: Rng>(
    denoiser: &Denoiser,
    store: &ParamStore,
    y0: &[f64],
    c: &[f64],
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<f64> {
    let cfg = denoiser.config();
    if c.len() != cfg.cond_dim {
        return Err(Error::Shape(format!("condition has {} values, expected {}", c.len(), cfg.cond_dim)));
    }
    let (ks, eps) = draw_noise(1, cfg.sample_len(), sched, rng);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let cv = tape.constant(Tensor::new(vec![1, c.len()], c.to_vec()));
    let loss = ddpm_loss_var(denoiser, &mut tape, &p, y0, cv, &ks, &eps, sched)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(mode: Conditioning) -> (Denoiser, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DenoiserConfig { conditioning: mode, widths: vec![4, 6], time_embed_dim: 6, cond_dim: 3, channels: 2, window: 8 };
        let d = Denoiser::new(cfg, &mut store, &mut rng).unwrap();
        (d, store)
    }

    #[test]
    fn config_validation() {
        let ok = DenoiserConfig::new(512, 3, 32);
        assert!(ok.validate().is_ok());
        assert_eq!(ok.downsampling(), 2);
        let bad = DenoiserConfig { widths: vec![4, 4, 4, 4, 4, 4, 4], ..ok.clone() };
        assert!(bad.validate().is_err());
        let odd = DenoiserConfig { time_embed_dim: 5, ..ok };
        assert!(odd.validate().is_err());
        assert!(matches!("attention".parse::<Conditioning>(), Err(Error::UnknownConditioning(_))));
        assert_eq!("FiLM".parse::<Conditioning>().unwrap(), Conditioning::Film);
    }

    #[test]
    fn shapes_determinism_and_counter() {
        for mode in [Conditioning::Film, Conditioning::Add, Conditioning::Concat] {
            let (d, store) = tiny(mode);
            let y: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
            let a = d.eps_predict(&store, &y, 5, &[0.1, -0.2, 0.3]).unwrap();
            let b = d.eps_predict(&store, &y, 5, &[0.1, -0.2, 0.3]).unwrap();
            assert_eq!(a.len(), 16);
            assert_eq!(a, b);
            assert_eq!(d.invocations(), 2);
            let other = d.eps_predict(&store, &y, 5, &[0.4, -0.2, 0.3]).unwrap();
            assert_ne!(a, other);
            d.reset_invocations();
            assert_eq!(d.invocations(), 0);
            assert!(d.eps_predict(&store, &y[..15], 5, &[0.0; 3]).is_err());
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let (d, store) = tiny(Conditioning::Film);
        let y: Vec<f64> = (0..32).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = [0.1, 0.2, 0.3, -0.5, 0.0, 0.9];
        let both = d.eps_predict_batch(&store, &y, &[3, 40], &c).unwrap();
        let first = d.eps_predict(&store, &y[..16], 3, &c[..3]).unwrap();
        let second = d.eps_predict(&store, &y[16..], 40, &c[3..]).unwrap();
        assert_eq!(both[..16], first[..]);
        assert_eq!(both[16..], second[..]);
    }

    #[test]
    fn identity_modulation_reduces_to_unconditioned_block() {
        let (d, mut store) = tiny(Conditioning::Film);
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).contains(".film.")).collect();
        assert!(!ids.is_empty());
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let y: Vec<f64> = (0..16).map(|i| i as f64 / 10.0).collect();
        let run = |modulate: bool| {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let yv = tape.constant(Tensor::new(vec![1, 2, 8], y.clone()));
            let cv = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]));
            let out = d.forward_impl(&mut tape, &p, yv, &[7], cv, modulate);
            tape.value(out).data().to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn timestep_embedding_values() {
        let e = timestep_embedding(&[0, 3], 4);
        assert_eq!(e.data()[..4], [0.0, 0.0, 1.0, 1.0]);
        assert!((e.data()[4] - 3f64.sin()).abs() < 1e-15);
        assert!((e.data()[5] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn loss_is_non_negative_and_draws_are_seeded() {
        let (d, store) = tiny(Conditioning::Add);
        let sched = DiffusionSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        let y0 = vec![0.5; 16];
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a = ddpm_loss(&d, &store, &y0, &[0.0; 3], &sched, &mut r1).unwrap();
        let b = ddpm_loss(&d, &store, &y0, &[0.0; 3], &sched, &mut r2).unwrap();
        assert!(a >= 0.0);
        assert_eq!(a, b);
        let (ks, eps) = draw_noise(50, 4, &sched, &mut r1);
        assert!(ks.iter().all(|&k| (1..=100).contains(&k)));
        assert_eq!(eps.len(), 200);
    }
}
