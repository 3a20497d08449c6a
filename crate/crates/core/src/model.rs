//! The statistical model: planted frames, noise tensors with materialized and
//! streamed backends, observations, the loss, and Euclidean gradients of the
//! noise and population parts.
//!
//! Sign convention: the loss is L(X; Y) = -sum_i lambda_i <Y, x_i^{(x)p}>, so
//! its population mean is -sqrt(N) sum_ij lambda_i lambda_j m_ij^p and descent
//! increases correlations. `grad_noise` returns the gradient of the raw noise
//! functional sum_i lambda_i <W, x_i^{(x)p}>; the full loss gradient is
//! `grad_population - grad_noise`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::manifold::{
    correlation_matrix, project_tangent, sample_invariant, Scale, StiefelPoint, TangentVector,
};
use crate::rng::{counter_normal, counter_sign};

/// Default cap on dense noise storage, in tensor entries (~800 MB of f64).
pub const DEFAULT_MEMORY_BUDGET: usize = 100_000_000;

/// Problem instance: dimensions, SNR vector, planted orthonormal frame.
#[derive(Debug, Clone)]
pub struct SpikedModel {
    n: usize,
    r: usize,
    p: u32,
    lambdas: Vec<f64>,
    v: StiefelPoint, // unit convention
}

impl SpikedModel {
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn r(&self) -> usize {
        self.r
    }

    #[inline]
    pub fn p(&self) -> u32 {
        self.p
    }

    #[inline]
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Planted frame with unit columns.
    #[inline]
    pub fn v_unit(&self) -> &StiefelPoint {
        &self.v
    }

    /// Planted frame rescaled to sqrt(N) columns.
    pub fn v_sqrtn(&self) -> StiefelPoint {
        self.v.to_scale(Scale::SqrtN)
    }
}

/// Build a model, sampling V from the invariant measure when not provided.
pub fn make_model<R: Rng + ?Sized>(
    n: usize,
    r: usize,
    p: u32,
    lambdas: Vec<f64>,
    rng: &mut R,
    v: Option<StiefelPoint>,
) -> Result<SpikedModel> {
    if p < 2 {
        return Err(Error::InvalidParameter(format!("need p >= 2, got {p}")));
    }
    if r < 1 || n < r {
        return Err(Error::InvalidDimension { n, r });
    }
    if lambdas.len() != r
        || lambdas.iter().any(|&l| !(l > 0.0))
        || lambdas.windows(2).any(|w| w[0] < w[1])
    {
        return Err(Error::InvalidLambdas);
    }
    let v = match v {
        Some(v) => {
            if v.n() != n || v.r() != r {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n}x{r}"),
                    got: format!("{}x{}", v.n(), v.r()),
                });
            }
            v.to_scale(Scale::Unit)
        }
        None => sample_invariant(n, r, Scale::Unit, rng)?,
    };
    Ok(SpikedModel {
        n,
        r,
        p,
        lambdas,
        v,
    })
}

/// Noise entry distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDist {
    Gaussian,
    Rademacher,
}

/// Sub-Gaussian noise specification.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    pub dist: NoiseDist,
    pub sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            dist: NoiseDist::Gaussian,
            sigma: 1.0,
        }
    }
}

impl NoiseSpec {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Backend {
    Materialized(Vec<f64>),
    Streamed { seed: u64 },
}

/// An order-p noise tensor on R^{N x ... x N}. Entries are i.i.d. centered
/// with scale sigma; the streamed backend computes each entry as a pure
/// function of (seed, flat index) so online SGD never materializes N^p memory.
#[derive(Debug, Clone)]
pub struct NoiseTensor {
    n: usize,
    p: u32,
    spec: NoiseSpec,
    backend: Backend,
}

fn entry_count(n: usize, p: u32) -> Option<usize> {
    let mut total: usize = 1;
    for _ in 0..p {
        total = total.checked_mul(n)?;
    }
    Some(total)
}

impl NoiseTensor {
    /// Backend chosen by the memory budget: materialized when N^p fits,
    /// streamed otherwise.
    pub fn sample(n: usize, p: u32, spec: &NoiseSpec, seed: u64) -> Result<NoiseTensor> {
        Self::sample_with_budget(n, p, spec, seed, DEFAULT_MEMORY_BUDGET)
    }

    pub fn sample_with_budget(
        n: usize,
        p: u32,
        spec: &NoiseSpec,
        seed: u64,
        budget: usize,
    ) -> Result<NoiseTensor> {
        spec.validate()?;
        match entry_count(n, p) {
            Some(total) if total <= budget => Self::materialized(n, p, spec, seed, budget),
            _ => Ok(Self::streamed(n, p, spec, seed)),
        }
    }

    /// Force the streamed backend.
    pub fn streamed(n: usize, p: u32, spec: &NoiseSpec, seed: u64) -> NoiseTensor {
        NoiseTensor {
            n,
            p,
            spec: *spec,
            backend: Backend::Streamed { seed },
        }
    }

    /// Force the materialized backend; errors when N^p exceeds the budget.
    pub fn materialized(
        n: usize,
        p: u32,
        spec: &NoiseSpec,
        seed: u64,
        budget: usize,
    ) -> Result<NoiseTensor> {
        spec.validate()?;
        let total = match entry_count(n, p) {
            Some(total) if total <= budget => total,
            _ => return Err(Error::OutOfBudget { n, p, budget }),
        };
        let mut data = Vec::with_capacity(total);
        for flat in 0..total {
            data.push(raw_entry(spec, seed, flat as u64));
        }
        Ok(NoiseTensor {
            n,
            p,
            spec: *spec,
            backend: Backend::Materialized(data),
        })
    }

    /// All-zero tensor; stands in for the noise-free setting.
    pub fn zero(n: usize, p: u32) -> NoiseTensor {
        NoiseTensor {
            n,
            p,
            spec: NoiseSpec::default(),
            backend: Backend::Materialized(vec![
                0.0;
                entry_count(n, p)
                    .expect("zero tensor must fit in memory")
            ]),
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn p(&self) -> u32 {
        self.p
    }

    #[inline]
    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn is_materialized(&self) -> bool {
        matches!(self.backend, Backend::Materialized(_))
    }

    /// Entry by flat index in row-major order (last index fastest).
    #[inline]
    pub fn entry_flat(&self, flat: usize) -> f64 {
        match &self.backend {
            Backend::Materialized(data) => data[flat],
            Backend::Streamed { seed } => raw_entry(&self.spec, *seed, flat as u64),
        }
    }

    /// Entry by multi-index.
    pub fn entry(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.p as usize, "index arity must equal p");
        let mut flat = 0usize;
        for &i in idx {
            assert!(i < self.n, "index out of range");
            flat = flat * self.n + i;
        }
        self.entry_flat(flat)
    }

    /// Symmetrized copy (dense): entries averaged over index permutations.
    /// Only used by tests at small N.
    pub fn symmetrized(&self) -> Result<NoiseTensor> {
        let total = entry_count(self.n, self.p).ok_or(Error::OutOfBudget {
            n: self.n,
            p: self.p,
            budget: usize::MAX,
        })?;
        let p = self.p as usize;
        let mut data = vec![0.0; total];
        let mut idx = vec![0usize; p];
        for (flat, slot) in data.iter_mut().enumerate() {
            decode_flat(flat, self.n, &mut idx);
            let mut perm = idx.clone();
            let mut sum = 0.0;
            let mut count = 0.0;
            permute_accumulate(&mut perm, 0, self.n, self, &mut sum, &mut count);
            *slot = sum / count;
        }
        Ok(NoiseTensor {
            n: self.n,
            p: self.p,
            spec: self.spec,
            backend: Backend::Materialized(data),
        })
    }
}

fn permute_accumulate(
    idx: &mut [usize],
    k: usize,
    n: usize,
    w: &NoiseTensor,
    sum: &mut f64,
    count: &mut f64,
) {
    if k == idx.len() {
        *sum += w.entry(idx);
        *count += 1.0;
        return;
    }
    for i in k..idx.len() {
        idx.swap(k, i);
        permute_accumulate(idx, k + 1, n, w, sum, count);
        idx.swap(k, i);
    }
}

#[inline]
fn raw_entry(spec: &NoiseSpec, seed: u64, counter: u64) -> f64 {
    match spec.dist {
        NoiseDist::Gaussian => spec.sigma * counter_normal(seed, counter),
        NoiseDist::Rademacher => spec.sigma * counter_sign(seed, counter),
    }
}

#[inline]
fn decode_flat(mut flat: usize, n: usize, idx: &mut [usize]) {
    for slot in idx.iter_mut().rev() {
        *slot = flat % n;
        flat /= n;
    }
}

/// <W, a^{(x)p}>: full contraction of the tensor with a rank-one power.
pub fn tensor_apply(w: &NoiseTensor, a: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), w.n());
    match &w.backend {
        Backend::Materialized(data) => apply_kernel(|flat| data[flat], w.n(), w.p() as usize, a),
        Backend::Streamed { seed } => {
            let spec = w.spec;
            let seed = *seed;
            apply_kernel(
                move |flat| raw_entry(&spec, seed, flat as u64),
                w.n(),
                w.p() as usize,
                a,
            )
        }
    }
}

fn apply_kernel<F: Fn(usize) -> f64>(entry: F, n: usize, p: usize, a: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    match p {
        2 => {
            let mut flat = 0usize;
            for i in 0..n {
                let ai = a[i];
                for j in 0..n {
                    acc += entry(flat) * ai * a[j];
                    flat += 1;
                }
            }
        }
        3 => {
            let mut flat = 0usize;
            for i in 0..n {
                let ai = a[i];
                for j in 0..n {
                    let aij = ai * a[j];
                    for k in 0..n {
                        acc += entry(flat) * aij * a[k];
                        flat += 1;
                    }
                }
            }
        }
        _ => {
            let total = {
                let mut t = 1usize;
                for _ in 0..p {
                    t *= n;
                }
                t
            };
            let mut idx = vec![0usize; p];
            for flat in 0..total {
                decode_flat(flat, n, &mut idx);
                let mut prod = 1.0;
                for &i in &idx {
                    prod *= a[i];
                }
                acc += entry(flat) * prod;
            }
        }
    }
    acc
}

/// Which gradient of <W, x^{(x)p}> to use for non-symmetric W.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// True gradient: sum of all p single-mode contractions.
    Exact,
    /// p times the mode-1 contraction (the form used throughout the analysis;
    /// coincides with `Exact` for symmetric W and agrees with it in law for
    /// i.i.d. noise).
    FirstMode,
}

/// Observation handle Y = W + sqrt(N) sum_i lambda_i v_i^{(x)p}. The noise
/// tensor is borrowed; the signal part is evaluated analytically. With
/// `signal` off the handle represents pure-noise data (null model) while the
/// loss weights still come from the model.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    noise: &'a NoiseTensor,
    model: &'a SpikedModel,
    signal: bool,
}

/// Build the observation handle for one sample.
pub fn observation<'a>(w: &'a NoiseTensor, model: &'a SpikedModel) -> Result<Observation<'a>> {
    if w.n() != model.n() || w.p() != model.p() {
        return Err(Error::ShapeMismatch {
            expected: format!("order-{} tensor on R^{}", model.p(), model.n()),
            got: format!("order-{} tensor on R^{}", w.p(), w.n()),
        });
    }
    Ok(Observation {
        noise: w,
        model,
        signal: true,
    })
}

impl<'a> Observation<'a> {
    /// Null-model observation: Y = W, no planted signal.
    pub fn noise_only(w: &'a NoiseTensor, model: &'a SpikedModel) -> Result<Observation<'a>> {
        let mut obs = observation(w, model)?;
        obs.signal = false;
        Ok(obs)
    }

    #[inline]
    pub fn noise(&self) -> &NoiseTensor {
        self.noise
    }

    #[inline]
    pub fn model(&self) -> &SpikedModel {
        self.model
    }

    #[inline]
    pub fn has_signal(&self) -> bool {
        self.signal
    }

    /// <Y, a^{(x)p}> for a unit-norm direction a.
    pub fn apply(&self, a: &DVector<f64>) -> f64 {
        let mut value = tensor_apply(self.noise, a);
        if self.signal {
            let m = self.model;
            let sqrt_n = (m.n() as f64).sqrt();
            for i in 0..m.r() {
                let overlap = m.v_unit().data().column(i).dot(a);
                value += sqrt_n * m.lambdas()[i] * overlap.powi(m.p() as i32);
            }
        }
        value
    }
}

/// L(X; Y) = -sum_i lambda_i <Y, x_i^{(x)p}> on the unit convention.
pub fn loss(x: &StiefelPoint, y: &Observation<'_>) -> Result<f64> {
    if x.scale() != Scale::Unit {
        return Err(Error::ConventionMismatch);
    }
    let mut acc = 0.0;
    for j in 0..x.r() {
        let xj = x.column(j);
        acc -= y.model.lambdas()[j] * y.apply(&xj);
    }
    if !acc.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(acc)
}

/// Gradient of sum_i lambda_i <W, x_i^{(x)p}>; column i is
/// lambda_i * grad_{x_i} <W, x_i^{(x)p}>.
///
/// One pass over the tensor entries serves every column: per entry the p
/// leave-one-out products of column values are accumulated into the output
/// (`Exact`), or only the mode-1 term scaled by p (`FirstMode`).
pub fn grad_noise(
    w: &NoiseTensor,
    x: &StiefelPoint,
    lambdas: &[f64],
    mode: GradMode,
) -> DMatrix<f64> {
    let n = w.n();
    let r = x.r();
    assert_eq!(x.n(), n);
    assert_eq!(lambdas.len(), r);
    let mut out = DMatrix::zeros(n, r);
    match &w.backend {
        Backend::Materialized(data) => {
            grad_dispatch(|flat| data[flat], w.p(), n, x.data(), mode, &mut out)
        }
        Backend::Streamed { seed } => {
            let spec = w.spec;
            let seed = *seed;
            grad_dispatch(
                move |flat| raw_entry(&spec, seed, flat as u64),
                w.p(),
                n,
                x.data(),
                mode,
                &mut out,
            )
        }
    }
    for c in 0..r {
        let l = lambdas[c];
        for k in 0..n {
            out[(k, c)] *= l;
        }
    }
    out
}

fn grad_dispatch<F: Fn(usize) -> f64>(
    entry: F,
    p: u32,
    n: usize,
    xd: &DMatrix<f64>,
    mode: GradMode,
    out: &mut DMatrix<f64>,
) {
    match p {
        2 => grad_kernel_p2(entry, n, xd, mode, out),
        3 => grad_kernel_p3(entry, n, xd, mode, out),
        p => grad_kernel_generic(entry, n, p as usize, xd, mode, out),
    }
}

fn grad_kernel_p2<F: Fn(usize) -> f64>(
    entry: F,
    n: usize,
    xd: &DMatrix<f64>,
    mode: GradMode,
    out: &mut DMatrix<f64>,
) {
    let r = xd.ncols();
    let mut flat = 0usize;
    for i in 0..n {
        for j in 0..n {
            let wv = entry(flat);
            flat += 1;
            for c in 0..r {
                match mode {
                    GradMode::Exact => {
                        out[(i, c)] += wv * xd[(j, c)];
                        out[(j, c)] += wv * xd[(i, c)];
                    }
                    GradMode::FirstMode => {
                        out[(i, c)] += 2.0 * wv * xd[(j, c)];
                    }
                }
            }
        }
    }
}

fn grad_kernel_p3<F: Fn(usize) -> f64>(
    entry: F,
    n: usize,
    xd: &DMatrix<f64>,
    mode: GradMode,
    out: &mut DMatrix<f64>,
) {
    let r = xd.ncols();
    let mut flat = 0usize;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let wv = entry(flat);
                flat += 1;
                for c in 0..r {
                    let (xi, xj, xk) = (xd[(i, c)], xd[(j, c)], xd[(k, c)]);
                    match mode {
                        GradMode::Exact => {
                            out[(i, c)] += wv * xj * xk;
                            out[(j, c)] += wv * xi * xk;
                            out[(k, c)] += wv * xi * xj;
                        }
                        GradMode::FirstMode => {
                            out[(i, c)] += 3.0 * wv * xj * xk;
                        }
                    }
                }
            }
        }
    }
}

fn grad_kernel_generic<F: Fn(usize) -> f64>(
    entry: F,
    n: usize,
    p: usize,
    xd: &DMatrix<f64>,
    mode: GradMode,
    out: &mut DMatrix<f64>,
) {
    let r = xd.ncols();
    let total = {
        let mut t = 1usize;
        for _ in 0..p {
            t *= n;
        }
        t
    };
    let mut idx = vec![0usize; p];
    let mut vals = vec![0.0f64; p];
    let mut suffixes = vec![0.0f64; p];
    for flat in 0..total {
        let wv = entry(flat);
        decode_flat(flat, n, &mut idx);
        for c in 0..r {
            for (q, &i) in idx.iter().enumerate() {
                vals[q] = xd[(i, c)];
            }
            match mode {
                GradMode::FirstMode => {
                    let mut prod = 1.0;
                    for &v in &vals[1..] {
                        prod *= v;
                    }
                    out[(idx[0], c)] += (p as f64) * wv * prod;
                }
                GradMode::Exact => {
                    // leave-one-out products via prefix/suffix sweeps
                    let mut suffix = 1.0;
                    for q in (0..p).rev() {
                        suffixes[q] = suffix;
                        suffix *= vals[q];
                    }
                    let mut prefix = 1.0;
                    for q in 0..p {
                        out[(idx[q], c)] += wv * prefix * suffixes[q];
                        prefix *= vals[q];
                    }
                }
            }
        }
    }
}

/// Euclidean gradient of the population part of the loss: column j is
/// -p sqrt(N) lambda_j sum_i lambda_i m_ij^{p-1} v_i (unit convention).
pub fn grad_population(x: &StiefelPoint, model: &SpikedModel) -> Result<DMatrix<f64>> {
    if x.scale() != Scale::Unit {
        return Err(Error::ConventionMismatch);
    }
    let m = correlation_matrix(model.v_unit(), x)?;
    let r = model.r();
    let pm1 = model.p() as i32 - 1;
    let sqrt_n = (model.n() as f64).sqrt();
    // coefficient matrix C with C_ij = -p sqrt(N) lambda_j lambda_i m_ij^{p-1}
    let mut coeff = DMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            coeff[(i, j)] = -(model.p() as f64)
                * sqrt_n
                * model.lambdas()[j]
                * model.lambdas()[i]
                * m.entry(i, j).powi(pm1);
        }
    }
    Ok(model.v_unit().data() * coeff)
}

/// Full Euclidean gradient of the loss L = -sum_i lambda_i <Y, x_i^{(x)p}>.
pub fn grad_loss(x: &StiefelPoint, y: &Observation<'_>, mode: GradMode) -> Result<DMatrix<f64>> {
    let noise_part = grad_noise(y.noise(), x, y.model().lambdas(), mode);
    if y.has_signal() {
        Ok(grad_population(x, y.model())? - noise_part)
    } else {
        Ok(-noise_part)
    }
}

/// H_0(X) = N^{-(p-1)/2} sum_i lambda_i <W, x_i^{(x)p}> on the sqrt(N)
/// convention.
pub fn hamiltonian_h0(w: &NoiseTensor, x: &StiefelPoint, lambdas: &[f64]) -> Result<f64> {
    if x.scale() != Scale::SqrtN {
        return Err(Error::ConventionMismatch);
    }
    let n = x.n() as f64;
    let norm = n.powf(-((w.p() as f64 - 1.0) / 2.0));
    let mut acc = 0.0;
    for i in 0..x.r() {
        let xi = x.column(i);
        acc += lambdas[i] * tensor_apply(w, &xi);
    }
    Ok(norm * acc)
}

/// Euclidean gradient of H_0 (sqrt(N) convention): column i is
/// N^{-(p-1)/2} lambda_i grad_{x_i} <W, x_i^{(x)p}>.
pub fn grad_h0(
    w: &NoiseTensor,
    x: &StiefelPoint,
    lambdas: &[f64],
    mode: GradMode,
) -> DMatrix<f64> {
    let n = x.n() as f64;
    let norm = n.powf(-((w.p() as f64 - 1.0) / 2.0));
    grad_noise(w, x, lambdas, mode) * norm
}

/// Euclidean gradient of the population term
/// Phi(X) = N sum_ij lambda_i lambda_j m_ij^p on the sqrt(N) convention:
/// column j is p lambda_j sum_k lambda_k m_kj^{p-1} v_k.
pub fn grad_population_sqrtn(
    x: &StiefelPoint,
    v_sqrtn: &StiefelPoint,
    lambdas: &[f64],
    p: u32,
) -> Result<DMatrix<f64>> {
    let m = correlation_matrix(v_sqrtn, x)?;
    let r = lambdas.len();
    let pm1 = p as i32 - 1;
    let mut coeff = DMatrix::zeros(r, r);
    for k in 0..r {
        for j in 0..r {
            coeff[(k, j)] = (p as f64) * lambdas[j] * lambdas[k] * m.entry(k, j).powi(pm1);
        }
    }
    Ok(v_sqrtn.data() * coeff)
}

/// Riemannian force of the empirical risk
/// R(X) = H_0(X)/sqrt(M) - N sum lambda_i lambda_j m_ij^p, i.e. -grad_M R.
/// With `rescaled` the drift of the Hamiltonian H = sqrt(M) R is returned
/// instead, which speeds the dynamics up by the factor sqrt(M).
pub fn empirical_risk_force(
    x: &StiefelPoint,
    w: Option<&NoiseTensor>,
    model: &SpikedModel,
    m_samples: f64,
    rescaled: bool,
) -> Result<TangentVector> {
    if x.scale() != Scale::SqrtN {
        return Err(Error::ConventionMismatch);
    }
    if !(m_samples >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "sample count M must be >= 1, got {m_samples}"
        )));
    }
    let v = model.v_sqrtn();
    let mut euclid = grad_population_sqrtn(x, &v, model.lambdas(), model.p())?;
    if let Some(w) = w {
        let noise = grad_h0(w, x, model.lambdas(), GradMode::Exact);
        euclid -= noise / m_samples.sqrt();
    }
    if rescaled {
        euclid *= m_samples.sqrt();
    }
    project_tangent(x, &euclid)
}
