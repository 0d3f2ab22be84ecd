//! Minimal state-space-dual sequence layer.
//!
//! Per head `h` with scalar decay `A_h < 0` and per-step inputs
//! `Δ_t > 0`, `B_t, C_t ∈ R^N`, the layer runs the selective recurrence
//!
//! ```text
//! ā_t = exp(Δ_t · A_h)
//! S_t = ā_t · S_{t-1} + Δ_t · B_t ⊗ u_t        (S_t ∈ R^{N × P}, S_0 = 0)
//! y_t = S_tᵀ C_t + D ⊙ u_t
//! ```
//!
//! over the `P = d_model / n_heads` channels owned by the head. `Δ`, `B`, `C`
//! are linear functions of the (pre-normed) input; `y` is followed by a
//! bias-free output projection. Equivalently `y = M u + D ⊙ u` with the
//! lower-triangular semiseparable matrix
//! `M[t, s] = C_t · (∏_{r=s+1..t} ā_r) · Δ_s B_s`.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::nn::{sigmoid, softplus, LayerNorm, LayerNormCache, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_state: usize,
    /// Initial bias inside `softplus` for the step size.
    #[serde(default = "default_dt_bias")]
    pub dt_bias_init: f64,
    /// `A_log` is initialized uniformly in `[ln lo, ln hi]`.
    #[serde(default = "default_a_range")]
    pub a_init_range: (f64, f64),
}

fn default_dt_bias() -> f64 {
    0.5
}

fn default_a_range() -> (f64, f64) {
    (1.0, 16.0)
}

impl Default for SsdConfig {
    fn default() -> Self {
        SsdConfig {
            d_model: 768,
            n_heads: 8,
            d_state: 64,
            dt_bias_init: default_dt_bias(),
            a_init_range: default_a_range(),
        }
    }
}

impl SsdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_state == 0 {
            return Err(Error::config("ssd", "d_model, n_heads and d_state must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "ssd.n_heads",
                format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        let (lo, hi) = self.a_init_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config("ssd.a_init_range", "need 0 < lo <= hi"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Learnable weights of one SSD layer (pre-norm included).
#[derive(Debug, Clone, PartialEq)]
pub struct SsdLayer {
    pub norm: LayerNorm,
    /// `d_model → n_heads`, with bias; `Δ = softplus(dt_proj(u))`.
    pub dt_proj: Linear,
    /// `d_model → n_heads · d_state`, bias-free.
    pub b_proj: Linear,
    /// `d_model → n_heads · d_state`, bias-free.
    pub c_proj: Linear,
    /// Per-head log decay; `A = -exp(a_log)`.
    pub a_log: Array1<f64>,
    /// Per-channel skip gain.
    pub d_skip: Array1<f64>,
    pub out_proj: Linear,
}
impl_parameters!(SsdLayer { norm, dt_proj, b_proj, c_proj, a_log, d_skip, out_proj });

/// Per-step quantities driving the recurrence for a sequence of length `L`.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a> {
    /// `L × d_model`
    pub u: ArrayView2<'a, f64>,
    /// `L × n_heads`, strictly positive
    pub dt: ArrayView2<'a, f64>,
    /// `L × (n_heads · d_state)`, head-major
    pub b: ArrayView2<'a, f64>,
    /// `L × (n_heads · d_state)`, head-major
    pub c: ArrayView2<'a, f64>,
    /// `n_heads`, strictly negative
    pub a: ArrayView1<'a, f64>,
    /// `d_model`
    pub d_skip: ArrayView1<'a, f64>,
}

/// Hidden states of every step, `[L, n_heads, d_state, head_dim]`.
pub type ScanStates = Array4<f64>;

#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub u: Array2<f64>,
    pub dt: Array2<f64>,
    pub b: Array2<f64>,
    pub c: Array2<f64>,
    pub a: Array1<f64>,
    pub d_skip: Array1<f64>,
}

/// Runs the recurrence; returns the outputs and every hidden state.
pub fn selective_scan(inp: &ScanInputs<'_>, d_state: usize) -> (Array2<f64>, ScanStates) {
    let (len, d_model) = inp.u.dim();
    let n_heads = inp.a.len();
    let p = d_model / n_heads;
    let mut y = Array2::zeros((len, d_model));
    let mut states = Array4::zeros((len, n_heads, d_state, p));
    let mut state = Array2::<f64>::zeros((d_state, p));
    for h in 0..n_heads {
        state.fill(0.0);
        let a = inp.a[h];
        for t in 0..len {
            let dt = inp.dt[[t, h]];
            let decay = (dt * a).exp();
            let u_t = inp.u.slice(s![t, h * p..(h + 1) * p]);
            let b_t = inp.b.slice(s![t, h * d_state..(h + 1) * d_state]);
            let c_t = inp.c.slice(s![t, h * d_state..(h + 1) * d_state]);
            for n in 0..d_state {
                let bn = dt * b_t[n];
                let mut row = state.row_mut(n);
                Zip::from(&mut row).and(&u_t).for_each(|sv, &uv| *sv = decay * *sv + bn * uv);
            }
            let mut y_t = y.slice_mut(s![t, h * p..(h + 1) * p]);
            y_t.assign(&state.t().dot(&c_t));
            Zip::from(&mut y_t)
                .and(&u_t)
                .and(inp.d_skip.slice(s![h * p..(h + 1) * p]))
                .for_each(|yv, &uv, &dv| *yv += dv * uv);
            states.slice_mut(s![t, h, .., ..]).assign(&state);
        }
    }
    (y, states)
}

/// Reverse-mode pass through [`selective_scan`].
pub fn selective_scan_backward(
    inp: &ScanInputs<'_>,
    states: &ScanStates,
    grad_y: &ArrayView2<'_, f64>,
) -> ScanGrads {
    let (len, d_model) = inp.u.dim();
    let n_heads = inp.a.len();
    let d_state = states.dim().2;
    let p = d_model / n_heads;
    let mut g = ScanGrads {
        u: Array2::zeros((len, d_model)),
        dt: Array2::zeros((len, n_heads)),
        b: Array2::zeros(inp.b.dim()),
        c: Array2::zeros(inp.c.dim()),
        a: Array1::zeros(n_heads),
        d_skip: Array1::zeros(d_model),
    };
    // Adjoint of the hidden state, dL/dS_t.
    let mut adj = Array2::<f64>::zeros((d_state, p));
    for h in 0..n_heads {
        adj.fill(0.0);
        let a = inp.a[h];
        let cols = h * p..(h + 1) * p;
        let scols = h * d_state..(h + 1) * d_state;
        for t in (0..len).rev() {
            let dt = inp.dt[[t, h]];
            let decay = (dt * a).exp();
            let u_t = inp.u.slice(s![t, cols.clone()]);
            let b_t = inp.b.slice(s![t, scols.clone()]);
            let c_t = inp.c.slice(s![t, scols.clone()]);
            let gy_t = grad_y.slice(s![t, cols.clone()]);
            let state = states.slice(s![t, h, .., ..]);

            for n in 0..d_state {
                let cn = c_t[n];
                Zip::from(adj.row_mut(n)).and(&gy_t).for_each(|av, &gv| *av += cn * gv);
            }
            g.c.slice_mut(s![t, scols.clone()]).assign(&state.dot(&gy_t));

            let dskip = inp.d_skip.slice(s![cols.clone()]);
            Zip::from(g.d_skip.slice_mut(s![cols.clone()]))
                .and(&gy_t)
                .and(&u_t)
                .for_each(|gd, &gv, &uv| *gd += gv * uv);

            // dS_t/d(Δ_t B_t ⊗ u_t) contributions
            let adj_b = adj.t().dot(&b_t); // P
            let mut gu_t = g.u.slice_mut(s![t, cols.clone()]);
            Zip::from(&mut gu_t)
                .and(&dskip)
                .and(&gy_t)
                .and(&adj_b)
                .for_each(|gu, &dv, &gv, &ab| *gu = dv * gv + dt * ab);
            let adj_u = adj.dot(&u_t); // N
            g.b.slice_mut(s![t, scols.clone()]).assign(&(&adj_u * dt));

            let g_decay = if t > 0 {
                let prev = states.slice(s![t - 1, h, .., ..]);
                Zip::from(&adj).and(&prev).fold(0.0, |acc, &x, &y| acc + x * y)
            } else {
                0.0
            };
            g.dt[[t, h]] = adj_u.dot(&b_t) + g_decay * decay * a;
            g.a[h] += g_decay * decay * dt;

            adj.mapv_inplace(|v| v * decay);
        }
    }
    g
}

/// Cached intermediates of [`SsdLayer::block_forward`].
#[derive(Debug, Clone)]
pub struct SsdCache {
    norm: Option<LayerNormCache>,
    u: Array2<f64>,
    dt_pre: Array2<f64>,
    dt: Array2<f64>,
    b: Array2<f64>,
    c: Array2<f64>,
    a: Array1<f64>,
    states: ScanStates,
    y_scan: Array2<f64>,
}

fn check_input(x: &Array2<f64>, d_model: usize) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("sequence length must be at least 1".into()));
    }
    if x.ncols() != d_model {
        return Err(Error::DimensionMismatch(format!(
            "expected {d_model} channels, got {}",
            x.ncols()
        )));
    }
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: pos / x.ncols(),
            col: pos % x.ncols(),
        });
    }
    Ok(())
}

impl SsdLayer {
    pub fn new<R: Rng + ?Sized>(cfg: &SsdConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let hn = cfg.n_heads * cfg.d_state;
        let mut dt_proj = Linear::new(d, cfg.n_heads, true, rng);
        if let Some(b) = dt_proj.bias.as_mut() {
            b.fill(cfg.dt_bias_init);
        }
        let (lo, hi) = cfg.a_init_range;
        let a_dist = Uniform::new_inclusive(lo.ln(), hi.ln()).expect("valid range");
        SsdLayer {
            norm: LayerNorm::new(d),
            dt_proj,
            b_proj: Linear::new(d, hn, false, rng),
            c_proj: Linear::new(d, hn, false, rng),
            a_log: Array1::from_shape_fn(cfg.n_heads, |_| a_dist.sample(rng)),
            d_skip: Array1::ones(d),
            out_proj: Linear::new(d, d, false, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_skip.len()
    }

    pub fn n_heads(&self) -> usize {
        self.a_log.len()
    }

    pub fn d_state(&self) -> usize {
        self.b_proj.fan_out() / self.n_heads()
    }

    pub fn decay_rates(&self) -> Array1<f64> {
        self.a_log.mapv(|v| -v.exp())
    }

    fn scan_forward_cached(&self, u: Array2<f64>, norm: Option<LayerNormCache>) -> (Array2<f64>, SsdCache) {
        let dt_pre = self.dt_proj.forward(&u);
        let dt = dt_pre.mapv(softplus);
        let b = self.b_proj.forward(&u);
        let c = self.c_proj.forward(&u);
        let a = self.decay_rates();
        let inputs = ScanInputs {
            u: u.view(),
            dt: dt.view(),
            b: b.view(),
            c: c.view(),
            a: a.view(),
            d_skip: self.d_skip.view(),
        };
        let (y_scan, states) = selective_scan(&inputs, self.d_state());
        let out = self.out_proj.forward(&y_scan);
        (
            out,
            SsdCache {
                norm,
                u,
                dt_pre,
                dt,
                b,
                c,
                a,
                states,
                y_scan,
            },
        )
    }

    /// Projections, recurrence and output projection on an already
    /// normalized input `u` (no pre-norm).
    pub fn ssd_forward(&self, u: &Array2<f64>) -> Result<Array2<f64>> {
        check_input(u, self.d_model())?;
        Ok(self.scan_forward_cached(u.clone(), None).0)
    }

    /// `ssd_forward(LN(x))`. The residual addition is left to the caller.
    pub fn block(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.block_forward(x)?.0)
    }

    pub fn block_forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, SsdCache)> {
        check_input(x, self.d_model())?;
        let (u, norm) = self.norm.forward(x);
        Ok(self.scan_forward_cached(u, Some(norm)))
    }

    pub fn block_backward(&self, cache: &SsdCache, grad_out: &Array2<f64>, grads: &mut SsdLayer) -> Array2<f64> {
        let g_scan = self.out_proj.backward(&cache.y_scan, grad_out, &mut grads.out_proj);
        let inputs = ScanInputs {
            u: cache.u.view(),
            dt: cache.dt.view(),
            b: cache.b.view(),
            c: cache.c.view(),
            a: cache.a.view(),
            d_skip: self.d_skip.view(),
        };
        let sg = selective_scan_backward(&inputs, &cache.states, &g_scan.view());
        grads.d_skip += &sg.d_skip;
        Zip::from(&mut grads.a_log)
            .and(&sg.a)
            .and(&cache.a)
            .for_each(|g, &ga, &a| *g += ga * a);
        let mut g_dt_pre = sg.dt;
        Zip::from(&mut g_dt_pre).and(&cache.dt_pre).for_each(|g, &x| *g *= sigmoid(x));
        let mut gu = sg.u;
        gu += &self.dt_proj.backward(&cache.u, &g_dt_pre, &mut grads.dt_proj);
        gu += &self.b_proj.backward(&cache.u, &sg.b, &mut grads.b_proj);
        gu += &self.c_proj.backward(&cache.u, &sg.c, &mut grads.c_proj);
        match &cache.norm {
            Some(norm) => self.norm.backward(norm, &gu, &mut grads.norm),
            None => gu,
        }
    }

    /// Per-step step sizes `Δ_t` for a normalized input; exposed for tests
    /// and diagnostics.
    pub fn step_sizes(&self, u: &Array2<f64>) -> Array2<f64> {
        self.dt_proj.forward(u).mapv(softplus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d_model: usize, n_heads: usize, d_state: usize) -> SsdConfig {
        SsdConfig {
            d_model,
            n_heads,
            d_state,
            ..SsdConfig::default()
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((l, d), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = SsdLayer::new(&cfg(8, 2, 4), &mut rng);
        for l in [1, 5, 17] {
            let y = layer.ssd_forward(&Array2::zeros((l, 8))).unwrap();
            assert!(y.iter().all(|&v| v == 0.0));
            let y = layer.block(&Array2::zeros((l, 8))).unwrap();
            assert!(y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn saturated_decay_is_memoryless() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = SsdLayer::new(&cfg(4, 1, 3), &mut rng);
        layer.a_log.fill(20.0);
        let u = random_input(&mut rng, 6, 4);
        let y = layer.ssd_forward(&u).unwrap();
        let dt = layer.step_sizes(&u);
        let b = layer.b_proj.forward(&u);
        let c = layer.c_proj.forward(&u);
        let mut expected = Array2::zeros((6, 4));
        for t in 0..6 {
            let cb: f64 = (0..3).map(|n| c[[t, n]] * b[[t, n]]).sum();
            for p in 0..4 {
                expected[[t, p]] = cb * dt[[t, 0]] * u[[t, p]] + layer.d_skip[p] * u[[t, p]];
            }
        }
        let expected = layer.out_proj.forward(&expected);
        let err = (&y - &expected).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-12, "err {err}");
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = SsdLayer::new(&cfg(4, 1, 2), &mut rng);
        assert!(matches!(layer.ssd_forward(&Array2::zeros((0, 4))), Err(Error::InvalidInput(_))));
        let mut x = Array2::zeros((3, 4));
        x[[1, 2]] = f64::NAN;
        assert!(matches!(layer.block(&x), Err(Error::NonFinite { row: 1, col: 2 })));
        assert!(layer.block(&Array2::zeros((3, 5))).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(10, 3, 2).validate().is_err());
        assert!(cfg(12, 3, 2).validate().is_ok());
        assert!(SsdConfig::default().validate().is_ok());
    }

    #[test]
    fn init_respects_stability_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = SsdLayer::new(&SsdConfig::default(), &mut rng);
        assert!(layer.decay_rates().iter().all(|&a| (-16.0..=-1.0).contains(&a)));
        assert!(layer.all_finite());
    }
}
