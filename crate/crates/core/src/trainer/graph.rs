//! The unrolled codec forward pass, generic over an evaluation context.
//!
//! One implementation serves three uses: plain f64 evaluation for
//! Lagrangian reports (with real quantization in the loop), plain f64
//! evaluation with the straight-through convention for finite-difference
//! checks, and tape evaluation for reverse-mode gradients. The quantizer
//! is a context hook: the tape context passes values through unchanged, so
//! the training graph sees `Q(x) = x` while reports can round.
//!
//! Bilateral weights follow the frozen-signal convention: the range kernel
//! reads a detached snapshot of the guide signal, so gradients reach the
//! bandwidths through the weight formula but not through the signal. The
//! snapshot is captured on the nominal pass and can be replayed so finite
//! differences see the same semantics.

use crate::cloud_io::VoxelizedCloud;
use crate::coding::params::{InvSqrtConfig, ModelParams, PredictorConfig};
use crate::coding::RATE_PROXY_FLOOR;
use crate::error::{Error, Result};
use crate::hierarchy::{build_hierarchy, LevelHierarchy};
use crate::linalg;
use crate::morton;
use crate::predictor::{Neighborhood, PredictorKind};
use crate::trainer::tape::{Tape, Var};

/// Evaluation context: plain values or autodiff tape.
pub trait Ctx {
    type V: Copy + std::fmt::Debug;

    /// Introduces a trainable parameter (tracked on the tape).
    fn param(&mut self, value: f64) -> Self::V;
    /// Introduces a constant (no gradient).
    fn constant(&mut self, value: f64) -> Self::V;
    fn value(&self, v: Self::V) -> f64;

    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    fn exp(&mut self, a: Self::V) -> Self::V;
    fn ln(&mut self, a: Self::V) -> Self::V;
    fn sqrt(&mut self, a: Self::V) -> Self::V;
    fn abs(&mut self, a: Self::V) -> Self::V;
    fn max(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn min(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn add_const(&mut self, a: Self::V, c: f64) -> Self::V;
    fn mul_const(&mut self, a: Self::V, c: f64) -> Self::V;
    fn max_const(&mut self, a: Self::V, c: f64) -> Self::V;

    /// Quantizer hook. Plain contexts may round; the tape context is the
    /// straight-through identity.
    fn quantize(&mut self, v: Self::V, step: f64) -> Self::V;

    /// Exact inverse square root fallback for contexts that support it
    /// (plain evaluation with the exact operator configured).
    fn exact_isqrt(&mut self, values: &[f64], dim: usize) -> Result<Vec<Self::V>>;
}

/// Plain f64 evaluation.
pub struct PlainCtx {
    /// Round coded coefficients (reporting mode) or pass through
    /// (straight-through mode, matching the tape).
    pub quantize: bool,
}

impl Ctx for PlainCtx {
    type V = f64;

    fn param(&mut self, value: f64) -> f64 {
        value
    }
    fn constant(&mut self, value: f64) -> f64 {
        value
    }
    fn value(&self, v: f64) -> f64 {
        v
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    fn ln(&mut self, a: f64) -> f64 {
        a.ln()
    }
    fn sqrt(&mut self, a: f64) -> f64 {
        a.sqrt()
    }
    fn abs(&mut self, a: f64) -> f64 {
        a.abs()
    }
    fn max(&mut self, a: f64, b: f64) -> f64 {
        if a >= b {
            a
        } else {
            b
        }
    }
    fn min(&mut self, a: f64, b: f64) -> f64 {
        if a <= b {
            a
        } else {
            b
        }
    }
    fn add_const(&mut self, a: f64, c: f64) -> f64 {
        a + c
    }
    fn mul_const(&mut self, a: f64, c: f64) -> f64 {
        a * c
    }
    fn max_const(&mut self, a: f64, c: f64) -> f64 {
        if a >= c {
            a
        } else {
            c
        }
    }
    fn quantize(&mut self, v: f64, step: f64) -> f64 {
        if self.quantize {
            (v / step).round() * step
        } else {
            v
        }
    }
    fn exact_isqrt(&mut self, values: &[f64], dim: usize) -> Result<Vec<f64>> {
        linalg::inv_sqrt_spd(values, dim, linalg::InvSqrtMode::Exact)
    }
}

/// Tape-backed evaluation; `params` records the leaves in binding order.
pub struct TapeCtx {
    pub tape: Tape,
    pub params: Vec<Var>,
}

impl TapeCtx {
    pub fn new() -> Self {
        TapeCtx {
            tape: Tape::new(),
            params: Vec::new(),
        }
    }
}

impl Default for TapeCtx {
    fn default() -> Self {
        Self::new()
    }
}

impl Ctx for TapeCtx {
    type V = Var;

    fn param(&mut self, value: f64) -> Var {
        let v = self.tape.leaf(value);
        self.params.push(v);
        v
    }
    fn constant(&mut self, value: f64) -> Var {
        self.tape.constant(value)
    }
    fn value(&self, v: Var) -> f64 {
        self.tape.value(v)
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        self.tape.add(a, b)
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        self.tape.sub(a, b)
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        self.tape.mul(a, b)
    }
    fn div(&mut self, a: Var, b: Var) -> Var {
        self.tape.div(a, b)
    }
    fn neg(&mut self, a: Var) -> Var {
        self.tape.neg(a)
    }
    fn exp(&mut self, a: Var) -> Var {
        self.tape.exp(a)
    }
    fn ln(&mut self, a: Var) -> Var {
        self.tape.ln(a)
    }
    fn sqrt(&mut self, a: Var) -> Var {
        self.tape.sqrt(a)
    }
    fn abs(&mut self, a: Var) -> Var {
        self.tape.abs(a)
    }
    fn max(&mut self, a: Var, b: Var) -> Var {
        self.tape.max(a, b)
    }
    fn min(&mut self, a: Var, b: Var) -> Var {
        self.tape.min(a, b)
    }
    fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.tape.add_const(a, c)
    }
    fn mul_const(&mut self, a: Var, c: f64) -> Var {
        self.tape.mul_const(a, c)
    }
    fn max_const(&mut self, a: Var, c: f64) -> Var {
        self.tape.max_const(a, c)
    }
    fn quantize(&mut self, v: Var, _step: f64) -> Var {
        v
    }
    fn exact_isqrt(&mut self, _values: &[f64], _dim: usize) -> Result<Vec<Var>> {
        Err(Error::Training(
            "the training graph requires the Taylor inverse-square-root mode".into(),
        ))
    }
}

/// Inverse-distance support of one level transition, geometry-only.
#[derive(Debug, Clone)]
pub struct GpccSupport {
    pub starts: Vec<usize>,
    pub parent: Vec<u32>,
    pub weight: Vec<f64>,
    pub total: Vec<f64>,
}

impl GpccSupport {
    fn build(parents: &[u64], children: &[u64]) -> Self {
        let mut starts = vec![0usize];
        let mut parent = Vec::new();
        let mut weight = Vec::new();
        let mut total = Vec::new();
        for &code in children {
            let (mx, my, mz) = morton::decode(code);
            let m = [mx as i64, my as i64, mz as i64];
            let mut tw = 0.0;
            for pick in 0..8u32 {
                let mut n = [0i64; 3];
                let mut ok = true;
                for (axis, nc) in n.iter_mut().enumerate() {
                    let base = m[axis] >> 1;
                    let alt = if m[axis] & 1 == 1 { base + 1 } else { base - 1 };
                    *nc = if pick >> axis & 1 == 0 { base } else { alt };
                    if *nc < 0 {
                        ok = false;
                    }
                }
                if !ok {
                    continue;
                }
                let pcode = morton::encode(n[0] as u32, n[1] as u32, n[2] as u32);
                let Ok(pi) = parents.binary_search(&pcode) else {
                    continue;
                };
                let mut d2 = 0.0;
                for axis in 0..3 {
                    let d = (2 * n[axis] + 1) as f64 - (m[axis] as f64 + 0.5);
                    d2 += d * d;
                }
                let w = 1.0 / d2.sqrt();
                parent.push(pi as u32);
                weight.push(w);
                tw += w;
            }
            total.push(tw);
            starts.push(parent.len());
        }
        GpccSupport {
            starts,
            parent,
            weight,
            total,
        }
    }
}

/// Geometry structures of one training crop, reusable across iterations.
#[derive(Debug, Clone)]
pub struct CropPlan {
    pub cloud: VoxelizedCloud,
    pub hierarchy: LevelHierarchy,
    pub neighborhoods: Vec<Neighborhood>,
    pub gpcc: Vec<GpccSupport>,
}

impl CropPlan {
    /// `levels` must match the parameter layout; the hierarchy root sits at
    /// `cloud.depth - levels`.
    pub fn new(cloud: VoxelizedCloud, levels: usize, kind: PredictorKind) -> Result<Self> {
        if (cloud.depth as usize) < levels {
            return Err(Error::Parameter(format!(
                "cloud depth {} is below the parameter level count {levels}",
                cloud.depth
            )));
        }
        let root = cloud.depth - levels as u8;
        let hierarchy = build_hierarchy(&cloud, root)?;
        let mut neighborhoods = Vec::new();
        let mut gpcc = Vec::new();
        for li in 0..levels {
            match kind {
                PredictorKind::Linear | PredictorKind::Pbf => {
                    neighborhoods.push(Neighborhood::build(
                        &hierarchy.nodes[li + 1],
                        root + li as u8 + 1,
                    ));
                }
                PredictorKind::Gpcc => {
                    gpcc.push(GpccSupport::build(
                        &hierarchy.nodes[li],
                        &hierarchy.nodes[li + 1],
                    ));
                }
                PredictorKind::None => {}
            }
        }
        Ok(CropPlan {
            cloud,
            hierarchy,
            neighborhoods,
            gpcc,
        })
    }
}

/// Model parameters materialized in a context.
pub struct ParamVars<V> {
    pub analysis: Vec<Vec<V>>,
    pub synthesis: Vec<Vec<V>>,
    pub linear: Vec<Vec<V>>,
    pub pbf_sigma: Option<(V, V)>,
    pub pbf_r: Vec<V>,
    /// Empty means the exact operator (plain contexts only).
    pub taylor_enc: Vec<Vec<V>>,
    pub taylor_dec: Vec<Vec<V>>,
    pub delta: V,
    pub rate_loc: Vec<V>,
    pub rate_div: Vec<V>,
}

/// Static facts the forward pass needs besides the parameters.
pub struct ForwardSpec {
    pub channels: usize,
    pub channel_scale: Vec<f64>,
    pub tied: bool,
    pub kind: PredictorKind,
    pub levels: usize,
}

impl ForwardSpec {
    pub fn from_params(params: &ModelParams, channels: usize) -> Self {
        ForwardSpec {
            channels,
            channel_scale: params.quantizer.channel_scale.clone(),
            tied: params.tied_kernels,
            kind: params.predictor.kind(),
            levels: params.level_count(),
        }
    }
}

/// Binds parameter values as untracked constants (for plain evaluation).
pub fn bind_constants<C: Ctx>(ctx: &mut C, params: &ModelParams) -> ParamVars<C::V> {
    let bind_kernels = |ks: &[crate::hierarchy::AKernel], ctx: &mut C| {
        ks.iter()
            .map(|k| k.0.iter().map(|&w| ctx.constant(w)).collect())
            .collect()
    };
    let analysis = bind_kernels(&params.analysis, ctx);
    let synthesis = if params.tied_kernels {
        bind_kernels(&params.analysis, ctx)
    } else {
        bind_kernels(&params.synthesis, ctx)
    };
    let (linear, pbf_sigma, pbf_r) = match &params.predictor {
        PredictorConfig::Linear(p) => (
            p.weights
                .iter()
                .map(|w| w.iter().map(|&v| ctx.constant(v)).collect())
                .collect(),
            None,
            Vec::new(),
        ),
        PredictorConfig::Pbf(p) => (
            Vec::new(),
            Some((ctx.constant(p.sigma_x), ctx.constant(p.sigma_y))),
            p.r.iter().map(|&v| ctx.constant(v)).collect(),
        ),
        _ => (Vec::new(), None, Vec::new()),
    };
    let (taylor_enc, taylor_dec) = match &params.inv_sqrt {
        InvSqrtConfig::Exact => (Vec::new(), Vec::new()),
        InvSqrtConfig::Taylor { encoder, decoder } => (
            encoder
                .iter()
                .map(|c| c.iter().map(|&v| ctx.constant(v)).collect())
                .collect(),
            decoder
                .iter()
                .map(|c| c.iter().map(|&v| ctx.constant(v)).collect())
                .collect(),
        ),
    };
    let delta = ctx.constant(params.quantizer.step);
    let rate_loc = params
        .rate_model
        .location
        .iter()
        .map(|&v| ctx.constant(v))
        .collect();
    let rate_div = params
        .rate_model
        .diversity
        .iter()
        .map(|&v| ctx.constant(v))
        .collect();
    ParamVars {
        analysis,
        synthesis,
        linear,
        pbf_sigma,
        pbf_r,
        taylor_enc,
        taylor_dec,
        delta,
        rate_loc,
        rate_div,
    }
}

/// Guide-signal source for the bilateral range kernel.
pub enum GuideSource<'a> {
    /// Detach the current upsampled luma (nominal pass).
    Compute,
    /// Replay a previously captured snapshot (finite differences).
    Frozen(&'a [Vec<f64>]),
}

/// Objective pieces of one crop. `se` and `bits` are totals, not per-point.
pub struct CropOutputs<V> {
    pub se: V,
    pub bits: V,
    pub per_level_bits: Vec<V>,
    pub guides: Vec<Vec<f64>>,
}

fn sum_vars<C: Ctx>(ctx: &mut C, items: &[C::V]) -> C::V {
    let mut acc = ctx.constant(0.0);
    for &it in items {
        acc = ctx.add(acc, it);
    }
    acc
}

/// Taylor-polynomial inverse square root over context values, mirroring
/// the numeric implementation: Gershgorin scaling then Horner evaluation.
fn taylor_isqrt<C: Ctx>(ctx: &mut C, m: &[C::V], dim: usize, coeffs: &[C::V]) -> Vec<C::V> {
    // Gershgorin bounds
    let mut lo: Option<C::V> = None;
    let mut hi: Option<C::V> = None;
    for i in 0..dim {
        let mut radius = ctx.constant(0.0);
        for j in 0..dim {
            if i != j {
                let a = ctx.abs(m[i * dim + j]);
                radius = ctx.add(radius, a);
            }
        }
        let d = m[i * dim + i];
        let row_lo = ctx.sub(d, radius);
        let row_hi = ctx.add(d, radius);
        lo = Some(match lo {
            Some(v) => ctx.min(v, row_lo),
            None => row_lo,
        });
        hi = Some(match hi {
            Some(v) => ctx.max(v, row_hi),
            None => row_hi,
        });
    }
    let (lo, hi) = (lo.unwrap(), hi.unwrap());
    let floor = ctx.mul_const(hi, 1e-6);
    let lo = ctx.max(lo, floor);
    let two = ctx.constant(2.0);
    let span = ctx.add(lo, hi);
    let scale = ctx.div(two, span);
    // x = scale*m - I
    let mut x = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            let sm = ctx.mul(scale, m[i * dim + j]);
            x.push(if i == j { ctx.add_const(sm, -1.0) } else { sm });
        }
    }
    // Horner
    let zero = ctx.constant(0.0);
    let mut r = vec![zero; dim * dim];
    for i in 0..dim {
        r[i * dim + i] = coeffs[coeffs.len() - 1];
    }
    for p in (0..coeffs.len() - 1).rev() {
        let mut next = vec![zero; dim * dim];
        for i in 0..dim {
            for k in 0..dim {
                let xik = x[i * dim + k];
                for j in 0..dim {
                    let t = ctx.mul(xik, r[k * dim + j]);
                    next[i * dim + j] = ctx.add(next[i * dim + j], t);
                }
            }
        }
        for i in 0..dim {
            next[i * dim + i] = ctx.add(next[i * dim + i], coeffs[p]);
        }
        r = next;
    }
    let root_scale = ctx.sqrt(scale);
    for v in &mut r {
        *v = ctx.mul(*v, root_scale);
    }
    r
}

fn isqrt_matrix<C: Ctx>(
    ctx: &mut C,
    psi: &[C::V],
    dim: usize,
    coeffs: Option<&[C::V]>,
) -> Result<Vec<C::V>> {
    match coeffs {
        Some(c) => Ok(taylor_isqrt(ctx, psi, dim, c)),
        None => {
            let values: Vec<f64> = psi.iter().map(|&v| ctx.value(v)).collect();
            ctx.exact_isqrt(&values, dim)
        }
    }
}

/// `-log2 P(bin of width step centered on y)` under Laplace(loc, div),
/// in the overflow-safe branch form used by the numeric rate proxy.
fn rate_term<C: Ctx>(
    ctx: &mut C,
    y: C::V,
    loc: C::V,
    div: C::V,
    step: C::V,
) -> C::V {
    let ymloc = ctx.sub(y, loc);
    let z = ctx.div(ymloc, div);
    let half_step = ctx.mul_const(step, 0.5);
    let h = ctx.div(half_step, div);
    let p = if ctx.value(z).abs() >= ctx.value(h) {
        let az = ctx.abs(z);
        let hmaz = ctx.sub(h, az);
        let e1 = ctx.exp(hmaz);
        let hpaz = ctx.add(h, az);
        let nhpaz = ctx.neg(hpaz);
        let e2 = ctx.exp(nhpaz);
        let diff = ctx.sub(e1, e2);
        ctx.mul_const(diff, 0.5)
    } else {
        let zmh = ctx.sub(z, h);
        let e1 = ctx.exp(zmh);
        let zph = ctx.add(z, h);
        let nzph = ctx.neg(zph);
        let e2 = ctx.exp(nzph);
        let s = ctx.add(e1, e2);
        let half = ctx.mul_const(s, -0.5);
        ctx.add_const(half, 1.0)
    };
    let p = ctx.max_const(p, RATE_PROXY_FLOOR);
    let lnp = ctx.ln(p);
    ctx.mul_const(lnp, -1.0 / std::f64::consts::LN_2)
}

/// Runs the unrolled encoder/decoder on one crop and accumulates the
/// squared reconstruction error and the rate proxy.
pub fn crop_objective<C: Ctx>(
    ctx: &mut C,
    plan: &CropPlan,
    pv: &ParamVars<C::V>,
    spec: &ForwardSpec,
    guide_source: GuideSource<'_>,
) -> Result<CropOutputs<C::V>> {
    let h = &plan.hierarchy;
    let levels = spec.levels;
    if h.level_count() != levels + 1 {
        return Err(Error::Shape(format!(
            "crop hierarchy has {} levels, parameters expect {}",
            h.level_count() - 1,
            levels
        )));
    }
    let ch = spec.channels;
    let one = ctx.constant(1.0);

    // Per-channel effective steps.
    let step_vars: Vec<C::V> = (0..ch)
        .map(|c| ctx.mul_const(pv.delta, spec.channel_scale.get(c).copied().unwrap_or(1.0)))
        .collect();
    let step_vals: Vec<f64> = step_vars.iter().map(|&s| ctx.value(s)).collect();

    // Squared kernel entries per level.
    let analysis_sq: Vec<Vec<C::V>> = (0..levels)
        .map(|li| {
            (0..8)
                .map(|d| ctx.mul(pv.analysis[li][d], pv.analysis[li][d]))
                .collect()
        })
        .collect();
    let synthesis: &Vec<Vec<C::V>> = if spec.tied { &pv.analysis } else { &pv.synthesis };

    // Gram recursion and low-pass sums, leaves to root.
    let n_points = h.point_count();
    let mut g: Vec<Vec<C::V>> = vec![Vec::new(); levels + 1];
    g[levels] = vec![one; n_points];
    let attrs: Vec<C::V> = plan
        .cloud
        .attributes
        .iter()
        .map(|&v| ctx.constant(v))
        .collect();
    let mut ftilde: Vec<Vec<C::V>> = vec![Vec::new(); levels + 1];
    ftilde[levels] = attrs.clone();
    for li in (0..levels).rev() {
        let zero = ctx.constant(0.0);
        let mut g_level = vec![zero; h.node_count(li)];
        let mut f_level = vec![zero; h.node_count(li) * ch];
        for block in &h.blocks[li] {
            let mut g_acc = ctx.constant(0.0);
            let mut f_acc = vec![ctx.constant(0.0); ch];
            for j in block.child_start..block.child_end {
                let d = h.octant_of(li + 1, j);
                let w = pv.analysis[li][d];
                let w2 = analysis_sq[li][d];
                let gt = ctx.mul(w2, g[li + 1][j]);
                g_acc = ctx.add(g_acc, gt);
                for (c, acc) in f_acc.iter_mut().enumerate() {
                    let t = ctx.mul(w, ftilde[li + 1][j * ch + c]);
                    *acc = ctx.add(*acc, t);
                }
            }
            g_level[block.parent] = g_acc;
            f_level[block.parent * ch..(block.parent + 1) * ch].copy_from_slice(&f_acc);
        }
        g[li] = g_level;
        ftilde[li] = f_level;
    }
    // Normalized low-pass per level.
    let mut fstar: Vec<Vec<C::V>> = Vec::with_capacity(levels + 1);
    for li in 0..=levels {
        let mut level = Vec::with_capacity(h.node_count(li) * ch);
        for i in 0..h.node_count(li) {
            for c in 0..ch {
                level.push(ctx.div(ftilde[li][i * ch + c], g[li][i]));
            }
        }
        fstar.push(level);
    }

    let mut per_level_bits: Vec<C::V> = Vec::with_capacity(levels + 1);
    let mut guides_out: Vec<Vec<f64>> = Vec::new();

    // Root: orthonormalize, rate, code, de-orthonormalize.
    let root_n = h.node_count(0);
    let mut f_hat = vec![one; root_n * ch];
    let mut root_bits = ctx.constant(0.0);
    for i in 0..root_n {
        let sqrt_g = ctx.sqrt(g[0][i]);
        for c in 0..ch {
            let bar = ctx.div(ftilde[0][i * ch + c], sqrt_g);
            let term = rate_term(ctx, bar, pv.rate_loc[0], pv.rate_div[0], step_vars[c]);
            root_bits = ctx.add(root_bits, term);
            let coded = ctx.quantize(bar, step_vals[c]);
            f_hat[i * ch + c] = ctx.div(coded, sqrt_g);
        }
    }
    per_level_bits.push(root_bits);

    for li in 0..levels {
        let mut level_bits = ctx.constant(0.0);
        // Upsampled field through the synthesis kernel (base of prediction
        // and of reconstruction).
        let next_n = h.node_count(li + 1);
        let mut upsampled = vec![one; next_n * ch];
        for block in &h.blocks[li] {
            for j in block.child_start..block.child_end {
                let w = synthesis[li][h.octant_of(li + 1, j)];
                for c in 0..ch {
                    upsampled[j * ch + c] = ctx.mul(w, f_hat[block.parent * ch + c]);
                }
            }
        }

        // Predicted field at level li+1, if a predictor is configured.
        let predicted: Option<Vec<C::V>> = match spec.kind {
            PredictorKind::None => None,
            PredictorKind::Linear => {
                let neigh = &plan.neighborhoods[li];
                let wset = if pv.linear.len() == 1 { &pv.linear[0] } else { &pv.linear[li] };
                let mut pred = vec![one; next_n * ch];
                for i in 0..next_n {
                    let es = neigh.starts[i]..neigh.starts[i + 1];
                    let mut deg = ctx.constant(0.0);
                    let mut abs_sum = 0.0;
                    for e in es.clone() {
                        let w = wset[neigh.kindex[e] as usize];
                        deg = ctx.add(deg, w);
                        abs_sum += ctx.value(w).abs();
                    }
                    if ctx.value(deg).abs() <= 1e-12 * abs_sum.max(1e-300) {
                        for c in 0..ch {
                            pred[i * ch + c] = upsampled[i * ch + c];
                        }
                        continue;
                    }
                    for c in 0..ch {
                        let mut acc = ctx.constant(0.0);
                        for e in es.clone() {
                            let w = wset[neigh.kindex[e] as usize];
                            let t = ctx.mul(w, upsampled[neigh.neighbor[e] as usize * ch + c]);
                            acc = ctx.add(acc, t);
                        }
                        pred[i * ch + c] = ctx.div(acc, deg);
                    }
                }
                Some(pred)
            }
            PredictorKind::Gpcc => {
                let sup = &plan.gpcc[li];
                let mut pred = vec![one; next_n * ch];
                for i in 0..next_n {
                    let es = sup.starts[i]..sup.starts[i + 1];
                    for c in 0..ch {
                        let mut acc = ctx.constant(0.0);
                        for e in es.clone() {
                            let t = ctx.mul_const(
                                f_hat[sup.parent[e] as usize * ch + c],
                                sup.weight[e],
                            );
                            acc = ctx.add(acc, t);
                        }
                        pred[i * ch + c] = ctx.mul_const(acc, 1.0 / sup.total[i]);
                    }
                }
                Some(pred)
            }
            PredictorKind::Pbf => {
                let neigh = &plan.neighborhoods[li];
                let (sx, sy) = pv.pbf_sigma.expect("pbf parameters bound");
                // Detached guide: channel 0 of the upsampled field.
                let guide: Vec<f64> = match &guide_source {
                    GuideSource::Compute => {
                        (0..next_n).map(|i| ctx.value(upsampled[i * ch])).collect()
                    }
                    GuideSource::Frozen(gs) => gs[li].clone(),
                };
                let sx2 = ctx.mul(sx, sx);
                let sy2 = ctx.mul(sy, sy);
                let half = ctx.constant(0.5);
                let inv2sx = ctx.div(half, sx2);
                let inv2sy = ctx.div(half, sy2);
                let mut weights = Vec::with_capacity(neigh.neighbor.len());
                for i in 0..next_n {
                    for e in neigh.starts[i]..neigh.starts[i + 1] {
                        let dg = guide[i] - guide[neigh.neighbor[e] as usize];
                        let t1 = ctx.mul_const(inv2sx, -(neigh.dist2[e] as f64));
                        let t2 = ctx.mul_const(inv2sy, -(dg * dg));
                        let s = ctx.add(t1, t2);
                        weights.push(ctx.exp(s));
                    }
                }
                let mut degree = Vec::with_capacity(next_n);
                for i in 0..next_n {
                    let row: Vec<C::V> =
                        (neigh.starts[i]..neigh.starts[i + 1]).map(|e| weights[e]).collect();
                    degree.push(sum_vars(ctx, &row));
                }
                let mut x = upsampled.clone();
                for &rk in pv.pbf_r.iter().skip(1) {
                    let one_minus = ctx.sub(one, rk);
                    let mut next = vec![one; next_n * ch];
                    for i in 0..next_n {
                        for c in 0..ch {
                            let mut acc = ctx.constant(0.0);
                            for e in neigh.starts[i]..neigh.starts[i + 1] {
                                let t =
                                    ctx.mul(weights[e], x[neigh.neighbor[e] as usize * ch + c]);
                                acc = ctx.add(acc, t);
                            }
                            let filt = ctx.div(acc, degree[i]);
                            let keep = ctx.mul(one_minus, x[i * ch + c]);
                            let blend = ctx.mul(rk, filt);
                            next[i * ch + c] = ctx.add(keep, blend);
                        }
                    }
                    x = next;
                }
                for v in &mut x {
                    *v = ctx.mul(pv.pbf_r[0], *v);
                }
                if matches!(guide_source, GuideSource::Compute) {
                    guides_out.push(guide);
                }
                Some(x)
            }
        };

        // Prediction delta: predicted field, minus the upsampling when the
        // kernels are untied.
        let pred_delta: Option<Vec<C::V>> = predicted.map(|p| {
            if spec.tied {
                p
            } else {
                p.iter()
                    .zip(&upsampled)
                    .map(|(&a, &b)| ctx.sub(a, b))
                    .collect()
            }
        });

        // Per block: bases, targets, prediction, residual rate, coding,
        // synthesis.
        let mut f_next = upsampled.clone();
        for (block, _) in h.blocks[li].iter().zip(0..) {
            let m = block.len();
            if m < 2 {
                continue;
            }
            let cols = m - 1;
            let gp = g[li][block.parent];
            let a: Vec<C::V> = (block.child_start..block.child_end)
                .map(|j| pv.analysis[li][h.octant_of(li + 1, j)])
                .collect();
            let gc: Vec<C::V> = (block.child_start..block.child_end)
                .map(|j| g[li + 1][j])
                .collect();
            // zmat and g-weighted zmat
            let mut z = vec![one; m * cols];
            let mut gz = vec![one; m * cols];
            for (col, k) in (1..m).enumerate() {
                let ag = ctx.mul(a[k], gc[k]);
                let scale = ctx.div(ag, gp);
                for j in 0..m {
                    let t = ctx.mul(a[j], scale);
                    let e = if j == k { ctx.sub(one, t) } else { ctx.neg(t) };
                    z[j * cols + col] = e;
                    gz[j * cols + col] = ctx.mul(gc[j], e);
                }
            }
            let mut psi = vec![one; cols * cols];
            for k in 0..cols {
                for k2 in k..cols {
                    let mut acc = ctx.constant(0.0);
                    for j in 0..m {
                        let t = ctx.mul(gz[j * cols + k], z[j * cols + k2]);
                        acc = ctx.add(acc, t);
                    }
                    psi[k * cols + k2] = acc;
                    psi[k2 * cols + k] = acc;
                }
            }
            let r_enc = isqrt_matrix(
                ctx,
                &psi,
                cols,
                pv.taylor_enc.get(li).map(|c| c.as_slice()),
            )?;
            let r_dec = isqrt_matrix(
                ctx,
                &psi,
                cols,
                pv.taylor_dec.get(li).map(|c| c.as_slice()),
            )?;

            for c in 0..ch {
                // raw inner products of targets and prediction
                let mut t_star = Vec::with_capacity(cols);
                let mut t_pred = Vec::with_capacity(cols);
                for k in 0..cols {
                    let mut acc_s = ctx.constant(0.0);
                    let mut acc_p = ctx.constant(0.0);
                    for (bj, j) in (block.child_start..block.child_end).enumerate() {
                        let gzv = gz[bj * cols + k];
                        let ts = ctx.mul(gzv, fstar[li + 1][j * ch + c]);
                        acc_s = ctx.add(acc_s, ts);
                        if let Some(pd) = &pred_delta {
                            let tp = ctx.mul(gzv, pd[j * ch + c]);
                            acc_p = ctx.add(acc_p, tp);
                        }
                    }
                    t_star.push(acc_s);
                    t_pred.push(acc_p);
                }
                // orthonormalized target and prediction
                let mut bar_hat = Vec::with_capacity(cols);
                for k in 0..cols {
                    let mut bar_star = ctx.constant(0.0);
                    let mut bar_prime = ctx.constant(0.0);
                    for k2 in 0..cols {
                        let ts = ctx.mul(r_enc[k * cols + k2], t_star[k2]);
                        bar_star = ctx.add(bar_star, ts);
                        if pred_delta.is_some() {
                            let tp = ctx.mul(r_enc[k * cols + k2], t_pred[k2]);
                            bar_prime = ctx.add(bar_prime, tp);
                        }
                    }
                    let y = ctx.sub(bar_star, bar_prime);
                    let term =
                        rate_term(ctx, y, pv.rate_loc[li + 1], pv.rate_div[li + 1], step_vars[c]);
                    level_bits = ctx.add(level_bits, term);
                    let coded = ctx.quantize(y, step_vals[c]);
                    bar_hat.push(ctx.add(bar_prime, coded));
                }
                // decode side: de-orthonormalize and synthesize
                let mut ghat = Vec::with_capacity(cols);
                for k in 0..cols {
                    let mut acc = ctx.constant(0.0);
                    for k2 in 0..cols {
                        let t = ctx.mul(r_dec[k * cols + k2], bar_hat[k2]);
                        acc = ctx.add(acc, t);
                    }
                    ghat.push(acc);
                }
                for (bj, j) in (block.child_start..block.child_end).enumerate() {
                    let mut acc = f_next[j * ch + c];
                    for (k, &gh) in ghat.iter().enumerate() {
                        let t = ctx.mul(z[bj * cols + k], gh);
                        acc = ctx.add(acc, t);
                    }
                    f_next[j * ch + c] = acc;
                }
            }
        }
        per_level_bits.push(level_bits);
        f_hat = f_next;
    }

    // Distortion against the exact leaf coefficients.
    let mut se = ctx.constant(0.0);
    for (idx, &target) in attrs.iter().enumerate() {
        let d = ctx.sub(target, f_hat[idx]);
        let d2 = ctx.mul(d, d);
        se = ctx.add(se, d2);
    }
    let bits = sum_vars(ctx, &per_level_bits);
    Ok(CropOutputs {
        se,
        bits,
        per_level_bits,
        guides: guides_out,
    })
}
