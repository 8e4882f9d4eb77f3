//! Simulation scenarios: AR-1 gene expression, percentile-cut SNPs and
//! pairwise-LD SNPs, with sparse true G-related effects and exchangeable
//! within-subject errors.
//!
//! Every random stream is derived from `(seed, replicate, purpose)`, so a
//! replicate is bit-identical no matter how many threads generate the
//! others.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{CoefLayout, LongitudinalDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Genetic factors are AR-1 multivariate normal expressions.
    GeneExpressionAr1,
    /// The expressions cut at each gene's 30th/70th percentiles into 0/1/2.
    DichotomizedSnp,
    /// SNPs with pairwise linkage disequilibrium between neighbours.
    LdSnp,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::GeneExpressionAr1 => "gene-expression-ar1",
            Scenario::DichotomizedSnp => "dichotomized-snp",
            Scenario::LdSnp => "ld-snp",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "gene-expression-ar1" | "expression" => Ok(Scenario::GeneExpressionAr1),
            "2" | "dichotomized-snp" | "snp" => Ok(Scenario::DichotomizedSnp),
            "3" | "ld-snp" | "ld" => Ok(Scenario::LdSnp),
            other => Err(Error::InvalidInput(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub k: usize,
    pub p: usize,
    pub q: usize,
    /// AR-1 auto-correlation of the environment and expression covariates.
    pub rho_x: f64,
    /// Exchangeable correlation of the within-subject errors.
    pub tau: f64,
    /// Minor allele frequency (LD scenario).
    pub maf: f64,
    /// Pairwise LD correlation between adjacent SNPs (LD scenario).
    pub r: f64,
    /// Nonzero G-related effects (main plus interaction).
    pub n_true: usize,
    pub coef_range: (f64, f64),
    /// Error standard deviation; 0 gives noise-free responses.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::GeneExpressionAr1,
            n: 400,
            k: 5,
            p: 200,
            q: 5,
            rho_x: 0.8,
            tau: 0.8,
            maf: 0.3,
            r: 0.3,
            n_true: 25,
            coef_range: (0.3, 0.7),
            noise_sd: 1.0,
            seed: 2022,
        }
    }
}

impl ScenarioConfig {
    pub fn layout(&self) -> CoefLayout {
        CoefLayout::new(self.p, self.q)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.n == 0 || self.k == 0 || self.p == 0 {
            return bad("n, k and p must be positive".into());
        }
        if !(self.rho_x > -1.0 && self.rho_x < 1.0) {
            return bad(format!("rho_x must lie in (-1, 1), got {}", self.rho_x));
        }
        let tau_lo = if self.k > 1 { -1.0 / (self.k as f64 - 1.0) } else { -1.0 };
        if !(self.tau > tau_lo && self.tau < 1.0) {
            return bad(format!("tau must lie in ({tau_lo}, 1), got {}", self.tau));
        }
        if !(self.maf > 0.0 && self.maf <= 0.5) {
            return bad(format!("maf must lie in (0, 0.5], got {}", self.maf));
        }
        if self.scenario == Scenario::LdSnp {
            HaplotypeFrequencies::new(self.maf, self.maf, self.r)?;
        }
        if self.n_true > self.p * (self.q + 1) {
            return bad(format!("n_true = {} exceeds the {} G-related coefficients", self.n_true, self.p * (self.q + 1)));
        }
        if !(self.coef_range.0 <= self.coef_range.1) {
            return bad("coef_range must be ordered".into());
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be non-negative".into());
        }
        Ok(())
    }
}

/// Purpose tags for derived random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Truth = 0,
    Train = 1,
    Validate = 2,
    Test = 3,
    Missing = 4,
}

/// Independent generator for `(seed, replicate, purpose)`.
pub fn stream_rng(seed: u64, replicate: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((replicate << 8) | purpose as u64);
    rng
}

/// Environment tensor (`n × k × q`, row-major) and genetic matrix (`n × p`).
#[derive(Debug, Clone)]
pub struct Covariates {
    pub env: Vec<f64>,
    pub gen: DMatrix<f64>,
}

/// Unit-variance AR-1 vector: `x₁ = z₁`, `x_j = ρ x_{j−1} + √(1−ρ²) z_j`.
fn ar1_draw<R: Rng + ?Sized>(rng: &mut R, len: usize, rho: f64, out: &mut [f64]) {
    let innov = (1.0 - rho * rho).sqrt();
    let mut prev = 0.0;
    for (j, slot) in out.iter_mut().enumerate().take(len) {
        let z: f64 = StandardNormal.sample(rng);
        prev = if j == 0 { z } else { rho * prev + innov * z };
        *slot = prev;
    }
}

/// Ranks of `values` (0 = smallest), ties broken by position.
fn ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut rank = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Expression draws for every subject: `n × p`, AR-1 across genes.
fn expression_matrix<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> DMatrix<f64> {
    let mut gen = DMatrix::zeros(config.n, config.p);
    let mut row = vec![0.0; config.p];
    for i in 0..config.n {
        ar1_draw(rng, config.p, config.rho_x, &mut row);
        for v in 0..config.p {
            gen[(i, v)] = row[v];
        }
    }
    gen
}

/// Cuts each column at its empirical 30th and 70th percentiles into 0/1/2.
pub fn percentile_genotypes(expr: &DMatrix<f64>) -> DMatrix<f64> {
    let n = expr.nrows();
    let cut = ((0.3 * n as f64).round() as usize).min(n / 2);
    let mut out = DMatrix::zeros(n, expr.ncols());
    for v in 0..expr.ncols() {
        let col: Vec<f64> = expr.column(v).iter().copied().collect();
        for (i, r) in ranks(&col).into_iter().enumerate() {
            out[(i, v)] = if r < cut {
                0.0
            } else if r >= n - cut {
                2.0
            } else {
                1.0
            };
        }
    }
    out
}

/// Environment factors per subject and time point, AR-1 across factors, with
/// the first factor split at its empirical median into 0/1.
fn environment<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Vec<f64> {
    let (n, k, q) = (config.n, config.k, config.q);
    let mut env = vec![0.0; n * k * q];
    for cell in env.chunks_mut(q.max(1)).take(n * k) {
        if q > 0 {
            ar1_draw(rng, q, config.rho_x, cell);
        }
    }
    if q > 0 {
        let first: Vec<f64> = (0..n * k).map(|c| env[c * q]).collect();
        let half = n * k - (n * k) / 2;
        for (c, r) in ranks(&first).into_iter().enumerate() {
            env[c * q] = if r >= half { 1.0 } else { 0.0 };
        }
    }
    env
}

pub fn gen_covariates<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<Covariates> {
    config.validate()?;
    let env = environment(config, rng);
    let gen = match config.scenario {
        Scenario::GeneExpressionAr1 => expression_matrix(config, rng),
        Scenario::DichotomizedSnp => percentile_genotypes(&expression_matrix(config, rng)),
        Scenario::LdSnp => gen_ld_snps(config, rng)?,
    };
    Ok(Covariates { env, gen })
}

/// Two-locus haplotype frequencies `[p_AB, p_Ab, p_aB, p_ab]` for minor
/// alleles `A`, `B` with frequencies `q_A`, `q_B` and LD
/// `δ = r·√(q_A(1−q_A)q_B(1−q_B))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaplotypeFrequencies {
    pub delta: f64,
    pub freqs: [f64; 4],
    pub maf_a: f64,
    pub maf_b: f64,
}

impl HaplotypeFrequencies {
    pub fn new(maf_a: f64, maf_b: f64, r: f64) -> Result<Self> {
        let delta = r * (maf_a * (1.0 - maf_a) * maf_b * (1.0 - maf_b)).sqrt();
        let freqs = [
            maf_a * maf_b + delta,
            maf_a * (1.0 - maf_b) - delta,
            (1.0 - maf_a) * maf_b - delta,
            (1.0 - maf_a) * (1.0 - maf_b) + delta,
        ];
        if freqs.iter().any(|&f| !(f >= 0.0 && f <= 1.0)) {
            return Err(Error::InvalidInput(format!("haplotype frequencies {freqs:?} leave [0, 1]")));
        }
        Ok(Self { delta, freqs, maf_a, maf_b })
    }

    /// Joint genotype distribution `P(#A = a, #B = b)` under random union of
    /// haplotypes.
    pub fn joint_genotypes(&self) -> [[f64; 3]; 3] {
        // (carries A, carries B) per haplotype, in `freqs` order.
        const ALLELES: [(usize, usize); 4] = [(1, 1), (1, 0), (0, 1), (0, 0)];
        let mut joint = [[0.0; 3]; 3];
        for (h1, &(a1, b1)) in ALLELES.iter().enumerate() {
            for (h2, &(a2, b2)) in ALLELES.iter().enumerate() {
                joint[a1 + a2][b1 + b2] += self.freqs[h1] * self.freqs[h2];
            }
        }
        joint
    }

    /// `P(#B = b | #A = a)`, rows indexed by `a`.
    pub fn conditional_genotypes(&self) -> [[f64; 3]; 3] {
        let joint = self.joint_genotypes();
        let mut cond = [[0.0; 3]; 3];
        for a in 0..3 {
            let total: f64 = joint[a].iter().sum();
            for b in 0..3 {
                cond[a][b] = if total > 0.0 { joint[a][b] / total } else { hwe(self.maf_b)[b] };
            }
        }
        cond
    }
}

/// Hardy–Weinberg genotype probabilities for 0, 1, 2 copies of the minor allele.
pub fn hwe(maf: f64) -> [f64; 3] {
    [(1.0 - maf).powi(2), 2.0 * maf * (1.0 - maf), maf * maf]
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64; 3]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    2
}

/// SNP genotypes (minor-allele counts) with LD between adjacent SNPs: the
/// first SNP is drawn under Hardy–Weinberg equilibrium and each next SNP from
/// the conditional genotype distribution given its left neighbour.
pub fn gen_ld_snps<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<DMatrix<f64>> {
    let hap = HaplotypeFrequencies::new(config.maf, config.maf, config.r)?;
    let cond = hap.conditional_genotypes();
    let first = hwe(config.maf);
    let mut gen = DMatrix::zeros(config.n, config.p);
    for i in 0..config.n {
        let mut g = categorical(rng, &first);
        gen[(i, 0)] = g as f64;
        for v in 1..config.p {
            g = categorical(rng, &cond[g]);
            gen[(i, v)] = g as f64;
        }
    }
    Ok(gen)
}

/// True coefficients and their G-related support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueCoefficients {
    pub beta: Vec<f64>,
    /// Genetic factors (0-based) with a nonzero main effect.
    pub main: BTreeSet<usize>,
    /// `(factor, environment)` pairs (0-based) with a nonzero interaction.
    pub inter: BTreeSet<(usize, usize)>,
}

impl TrueCoefficients {
    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    pub fn nonzero_count(&self) -> usize {
        self.beta.iter().filter(|&&b| b != 0.0).count()
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedTruth {
    pub coefficients: TrueCoefficients,
    pub dataset: LongitudinalDataset,
}

/// Group patterns `(has_main, interaction_count)` for the G-related support.
///
/// Main:interaction split is 6:19 at the default 25 effects. The pattern
/// mixes whole groups, one interaction-only group, main-plus-one-interaction
/// groups and a main-only group.
fn support_patterns(q: usize, n_true: usize) -> Vec<(bool, usize)> {
    if q == 0 {
        return vec![(true, 0); n_true];
    }
    let mut mains = ((n_true as f64) * 6.0 / 25.0).round() as usize;
    mains = mains.min(n_true);
    let mut inters = n_true - mains;
    let mut out = Vec::new();
    let n_full = (mains / 2).min(inters / q);
    out.extend(std::iter::repeat_n((true, q), n_full));
    mains -= n_full;
    inters -= n_full * q;
    if inters > 0 {
        let c = q.min((inters / 2).max(1));
        out.push((false, c));
        inters -= c;
    }
    let paired = mains.saturating_sub(1).min(inters);
    out.extend(std::iter::repeat_n((true, 1), paired));
    mains -= paired;
    inters -= paired;
    out.extend(std::iter::repeat_n((true, 0), mains));
    while inters > 0 {
        let c = inters.min(q);
        out.push((false, c));
        inters -= c;
    }
    out
}

/// Draws positions and magnitudes of the true coefficients.
pub fn draw_coefficients<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<TrueCoefficients> {
    config.validate()?;
    let layout = config.layout();
    let (lo, hi) = config.coef_range;
    let magnitude = |rng: &mut R| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let mut beta = vec![0.0; layout.d()];
    for j in layout.unpenalized() {
        beta[j] = magnitude(rng);
    }
    let mut main = BTreeSet::new();
    let mut inter = BTreeSet::new();
    let patterns = support_patterns(config.q, config.n_true);
    if patterns.len() <= config.p {
        let groups = sample(rng, config.p, patterns.len()).into_vec();
        for (&v, &(has_main, n_inter)) in groups.iter().zip(&patterns) {
            if has_main {
                main.insert(v);
            }
            for u in sample(rng, config.q, n_inter).into_iter() {
                inter.insert((v, u));
            }
        }
    } else {
        // Too few factors for the patterned layout: scatter the effects.
        let g = config.q + 1;
        for idx in sample(rng, config.p * g, config.n_true).into_iter() {
            let (v, u) = (idx / g, idx % g);
            if u == 0 {
                main.insert(v);
            } else {
                inter.insert((v, u - 1));
            }
        }
    }
    for &v in &main {
        beta[layout.main_index(v)] = magnitude(rng);
    }
    for &(v, u) in &inter {
        beta[layout.interaction_index(v, u)] = magnitude(rng);
    }
    Ok(TrueCoefficients { beta, main, inter })
}

/// Responses `Y = Wβ + ε` with `ε_i ~ N(0, σ²[(1−τ)I + τ11ᵀ])`.
pub fn draw_response<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    coefficients: &TrueCoefficients,
    covariates: Covariates,
    rng: &mut R,
) -> Result<LongitudinalDataset> {
    let (n, k, q) = (config.n, config.k, config.q);
    let layout = config.layout();
    let sigma = DMatrix::from_fn(k, k, |a, b| if a == b { 1.0 } else { config.tau });
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("error covariance is not positive definite".into()))?
        .l();
    let beta = &coefficients.beta;
    let mut y = DMatrix::zeros(n, k);
    for i in 0..n {
        let z = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
        let eps = &chol * z * config.noise_sd;
        for j in 0..k {
            let e = &covariates.env[(i * k + j) * q..(i * k + j + 1) * q];
            let mut mu = beta[0];
            for u in 0..q {
                mu += beta[1 + u] * e[u];
            }
            for v in 0..layout.p {
                let x = covariates.gen[(i, v)];
                let g = layout.main_index(v);
                let mut slope = beta[g];
                for u in 0..q {
                    slope += beta[g + 1 + u] * e[u];
                }
                mu += slope * x;
            }
            y[(i, j)] = mu + eps[j];
        }
    }
    LongitudinalDataset::balanced(y, covariates.env, q, covariates.gen)
}

/// Covariates, coefficients and response from one generator.
pub fn gen_truth_and_response<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    covariates: Covariates,
    rng: &mut R,
) -> Result<SimulatedTruth> {
    let coefficients = draw_coefficients(config, rng)?;
    let dataset = draw_response(config, &coefficients, covariates, rng)?;
    Ok(SimulatedTruth { coefficients, dataset })
}

/// Independent dataset drawn with fixed true coefficients.
pub fn draw_dataset<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    coefficients: &TrueCoefficients,
    rng: &mut R,
) -> Result<LongitudinalDataset> {
    let cov = gen_covariates(config, rng)?;
    draw_response(config, coefficients, cov, rng)
}

/// One Monte-Carlo replicate: shared truth, independent training,
/// validation and test sets.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub index: u64,
    pub coefficients: TrueCoefficients,
    pub train: LongitudinalDataset,
    pub validate: LongitudinalDataset,
    pub test: LongitudinalDataset,
}

pub fn simulate_replicate(config: &ScenarioConfig, index: u64) -> Result<Replicate> {
    let coefficients = draw_coefficients(config, &mut stream_rng(config.seed, index, Stream::Truth))?;
    let draw = |s| draw_dataset(config, &coefficients, &mut stream_rng(config.seed, index, s));
    Ok(Replicate {
        index,
        train: draw(Stream::Train)?,
        validate: draw(Stream::Validate)?,
        test: draw(Stream::Test)?,
        coefficients,
    })
}

/// Marks a random `fraction` of time points as missing, keeping at least one
/// per subject.
pub fn drop_time_points<R: Rng + ?Sized>(data: &LongitudinalDataset, fraction: f64, rng: &mut R) -> Result<LongitudinalDataset> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!("missing fraction must lie in [0, 1), got {fraction}")));
    }
    let (n, k) = (data.n(), data.k());
    let mut mask = data.observed_mask().to_vec();
    let target = (fraction * (n * k) as f64).round() as usize;
    let mut dropped = 0;
    for cell in sample(rng, n * k, n * k).into_iter() {
        if dropped == target {
            break;
        }
        let i = cell / k;
        if mask[cell] && mask[i * k..(i + 1) * k].iter().filter(|&&o| o).count() > 1 {
            mask[cell] = false;
            dropped += 1;
        }
    }
    data.with_mask(mask)
}
