//! Multi-domain episodic data.
//!
//! Synthetic domains draw class prototypes from a unit Gaussian, add
//! per-domain isotropic noise and push everything through a random affine
//! map. Labels are split into disjoint meta-train and meta-test sets.
//! Small real datasets can be loaded from CSV instead.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which label partition an episode draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Parameters of one synthetic domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: String,
    pub n_classes: usize,
    pub d_in: usize,
    pub noise_sigma: f64,
    /// Overall gain of the affine map.
    pub transform_scale: f64,
    /// Standard deviation of the translation.
    pub shift_scale: f64,
    /// Upper bound on the condition number of the linear part.
    pub max_condition: f64,
    /// Fraction of labels assigned to the meta-train split.
    pub split_ratio: f64,
    /// Largest way any episode will request.
    pub n_way_max: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Source<T> {
    Synthetic {
        prototypes: Tensor<T>,
        /// Applied on the right: `x = z·M + c`.
        transform: Tensor<T>,
        shift: Vec<T>,
        noise_sigma: f64,
    },
    Samples {
        /// Rows of each label.
        by_label: Vec<Tensor<T>>,
    },
}

/// A labelled domain with a disjoint train/test label partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain<T> {
    pub id: String,
    dim: usize,
    source: Source<T>,
    split: Vec<Split>,
    label_names: Vec<String>,
}

fn split_labels<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<Vec<Split>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} outside [0, 1]")));
    }
    let n_train = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut split = vec![Split::Test; n];
    for &l in &order[..n_train] {
        split[l] = Split::Train;
    }
    Ok(split)
}

/// Random orthogonal matrix from Gram–Schmidt on a Gaussian matrix.
fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

impl<T: Scalar> Domain<T> {
    /// Builds a synthetic domain. The stream is keyed by `(seed, id)`, so
    /// domains with different ids get different prototypes and transforms
    /// under the same seed.
    pub fn synthetic(spec: &DomainSpec, seed: u64) -> Result<Self> {
        if spec.n_classes < 2 * spec.n_way_max {
            return Err(Error::InvalidArgument(format!(
                "domain {}: {} classes cannot serve {}-way episodes on both splits",
                spec.id, spec.n_classes, spec.n_way_max
            )));
        }
        if spec.d_in == 0 || !(spec.noise_sigma >= 0.0) || !(spec.max_condition >= 1.0) {
            return Err(Error::InvalidArgument(format!("domain {}: invalid spec", spec.id)));
        }
        let mut rng = rng::stream(seed, &["domain".into(), spec.id.as_str().into()]);
        let d = spec.d_in;
        let prototypes: Vec<T> = (0..spec.n_classes * d)
            .map(|_| T::from_f64_lossy(StandardNormal.sample(&mut rng)))
            .collect();
        let u = random_orthogonal(d, &mut rng);
        let v = random_orthogonal(d, &mut rng);
        let log_k = spec.max_condition.ln();
        let s: Vec<f64> = (0..d)
            .map(|_| spec.transform_scale * (log_k * (rng.random::<f64>() - 0.5)).exp())
            .collect();
        // M = Σ_k u_k s_k v_kᵀ
        let mut m = vec![T::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                let val: f64 = (0..d).map(|k| u[k][i] * s[k] * v[k][j]).sum();
                m[i * d + j] = T::from_f64_lossy(val);
            }
        }
        let shift_dist = Normal::new(0.0, spec.shift_scale.max(0.0))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let shift = (0..d).map(|_| T::from_f64_lossy(shift_dist.sample(&mut rng))).collect();
        let split = split_labels(spec.n_classes, spec.split_ratio, &mut rng)?;
        Ok(Self {
            id: spec.id.clone(),
            dim: d,
            source: Source::Synthetic {
                prototypes: Tensor::matrix(spec.n_classes, d, prototypes)?,
                transform: Tensor::matrix(d, d, m)?,
                shift,
                noise_sigma: spec.noise_sigma,
            },
            split,
            label_names: (0..spec.n_classes).map(|l| l.to_string()).collect(),
        })
    }

    /// Loads `f0,…,f{d-1},label` rows. The label split comes from a seeded
    /// shuffle of the sorted label names.
    pub fn load_csv(path: &Path, split_ratio: f64, seed: u64) -> Result<Self> {
        let err = |detail: String| Error::Dataset {
            path: path.to_path_buf(),
            detail,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = reader.headers()?.clone();
        let ncols = headers.len();
        if ncols < 2 || headers.get(ncols - 1) != Some("label") {
            return Err(err("header must be f0,…,f{d-1},label".into()));
        }
        let d = ncols - 1;
        let mut rows: BTreeMap<String, Vec<Vec<T>>> = BTreeMap::new();
        for (i, record) in reader.records().enumerate() {
            let row_no = i + 1;
            let record = record?;
            if record.len() != ncols {
                return Err(err(format!(
                    "row {row_no} (line {}): expected {ncols} columns, found {}",
                    row_no + 1,
                    record.len()
                )));
            }
            let mut feats = Vec::with_capacity(d);
            for (j, field) in record.iter().take(d).enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    err(format!("row {row_no} (line {}): feature f{j} is not numeric: {field:?}", row_no + 1))
                })?;
                if !v.is_finite() {
                    return Err(err(format!(
                        "row {row_no} (line {}): feature f{j} is not finite",
                        row_no + 1
                    )));
                }
                feats.push(T::from_f64_lossy(v));
            }
            rows.entry(record[d].to_string()).or_default().push(feats);
        }
        if rows.len() < 2 {
            return Err(err("need at least two labels".into()));
        }
        let label_names: Vec<String> = rows.keys().cloned().collect();
        let by_label = rows
            .into_values()
            .map(|r| Tensor::from_rows(&r))
            .collect::<Result<Vec<_>>>()?;
        let id = path
            .file_stem()
            .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
        let mut rng = rng::stream(seed, &["csv-split".into(), id.as_str().into()]);
        let split = split_labels(label_names.len(), split_ratio, &mut rng)?;
        Ok(Self {
            id,
            dim: d,
            source: Source::Samples { by_label },
            split,
            label_names,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.split.len()
    }

    pub fn label_name(&self, label: usize) -> &str {
        &self.label_names[label]
    }

    pub fn split_of(&self, label: usize) -> Split {
        self.split[label]
    }

    pub fn labels(&self, split: Split) -> Vec<usize> {
        (0..self.split.len()).filter(|&l| self.split[l] == split).collect()
    }

    /// Total number of stored samples, `None` for synthetic domains.
    pub fn n_samples(&self) -> Option<usize> {
        match &self.source {
            Source::Samples { by_label } => Some(by_label.iter().map(Tensor::rows).sum()),
            Source::Synthetic { .. } => None,
        }
    }

    pub fn prototypes(&self) -> Option<&Tensor<T>> {
        match &self.source {
            Source::Synthetic { prototypes, .. } => Some(prototypes),
            Source::Samples { .. } => None,
        }
    }

    /// Condition number bound is enforced at construction; this returns the
    /// linear part of the affine map for inspection.
    pub fn transform(&self) -> Option<(&Tensor<T>, &[T])> {
        match &self.source {
            Source::Synthetic { transform, shift, .. } => Some((transform, shift)),
            Source::Samples { .. } => None,
        }
    }

    fn synth_rows<R: Rng + ?Sized>(&self, label: usize, n: usize, rng: &mut R) -> Result<Tensor<T>> {
        let Source::Synthetic {
            prototypes,
            transform,
            shift,
            noise_sigma,
        } = &self.source
        else {
            unreachable!("synthetic source");
        };
        let d = self.dim;
        let mu = prototypes.row(label);
        let mut z = Vec::with_capacity(n * d);
        for _ in 0..n {
            for &m in mu {
                let e: f64 = StandardNormal.sample(rng);
                z.push(m + T::from_f64_lossy(noise_sigma * e));
            }
        }
        let mut x = Tensor::matrix(n, d, z)?.matmul(transform)?;
        for row in x.data_mut().chunks_mut(d) {
            row.iter_mut().zip(shift).for_each(|(v, &c)| *v = *v + c);
        }
        Ok(x)
    }

    /// Samples `k_shot + n_query` items of `label`, support first.
    fn draw<R: Rng + ?Sized>(&self, label: usize, n: usize, rng: &mut R) -> Result<Tensor<T>> {
        match &self.source {
            Source::Synthetic { .. } => self.synth_rows(label, n, rng),
            Source::Samples { by_label } => {
                let pool = &by_label[label];
                let picks = index::sample(rng, pool.rows(), n).into_vec();
                Ok(pool.select_rows(&picks))
            }
        }
    }

    fn available(&self, label: usize) -> usize {
        match &self.source {
            Source::Synthetic { .. } => usize::MAX,
            Source::Samples { by_label } => by_label[label].rows(),
        }
    }
}

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Range {
    pub min: usize,
    pub max: usize,
}

impl Range {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    pub fn fixed(v: usize) -> Self {
        Self { min: v, max: v }
    }
}

/// One few-shot task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<T> {
    pub support_x: Tensor<T>,
    pub support_y: Vec<usize>,
    pub query_x: Tensor<T>,
    pub query_y: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub domain_id: String,
}

impl<T: Scalar> Episode<T> {
    pub fn support_len(&self) -> usize {
        self.support_y.len()
    }

    pub fn query_len(&self) -> usize {
        self.query_y.len()
    }
}

/// Draws an `n_way`-way `k_shot`-shot episode with `n_query` queries per
/// class from the labels of `split`. The way is clipped to the number of
/// usable classes.
pub fn sample_episode<T: Scalar, R: Rng + ?Sized>(
    domain: &Domain<T>,
    ways: Range,
    shots: Range,
    n_query: usize,
    split: Split,
    rng: &mut R,
) -> Result<Episode<T>> {
    if ways.min < 2 || ways.min > ways.max || shots.min < 1 || shots.min > shots.max || n_query == 0 {
        return Err(Error::Infeasible(format!(
            "ways {ways:?}, shots {shots:?}, n_query {n_query}"
        )));
    }
    let k_shot = rng.random_range(shots.min..=shots.max);
    let eligible: Vec<usize> = domain
        .labels(split)
        .into_iter()
        .filter(|&l| domain.available(l) >= k_shot + n_query)
        .collect();
    if eligible.len() < ways.min {
        return Err(Error::Infeasible(format!(
            "domain {} has {} usable {} classes, episode needs at least {}",
            domain.id,
            eligible.len(),
            split.name(),
            ways.min
        )));
    }
    let n_way = rng.random_range(ways.min..=ways.max.min(eligible.len()));
    let mut classes: Vec<usize> = index::sample(rng, eligible.len(), n_way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    classes.sort_unstable();

    let d = domain.dim();
    let mut sx = Vec::with_capacity(n_way * k_shot * d);
    let mut qx = Vec::with_capacity(n_way * n_query * d);
    let mut sy = Vec::with_capacity(n_way * k_shot);
    let mut qy = Vec::with_capacity(n_way * n_query);
    for &c in &classes {
        let rows = domain.draw(c, k_shot + n_query, rng)?;
        let (s, q) = rows.data().split_at(k_shot * d);
        sx.extend_from_slice(s);
        qx.extend_from_slice(q);
        sy.extend(std::iter::repeat_n(c, k_shot));
        qy.extend(std::iter::repeat_n(c, n_query));
    }
    Ok(Episode {
        support_x: Tensor::matrix(sy.len(), d, sx)?,
        support_y: sy,
        query_x: Tensor::matrix(qy.len(), d, qx)?,
        query_y: qy,
        n_way,
        k_shot,
        n_query,
        domain_id: domain.id.clone(),
    })
}

/// Episode shape parameters shared by every stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeShape {
    pub ways: Range,
    pub shots: Range,
    pub n_query: usize,
}

impl Default for EpisodeShape {
    fn default() -> Self {
        Self {
            ways: Range::new(3, 8),
            shots: Range::new(1, 5),
            n_query: 10,
        }
    }
}

impl EpisodeShape {
    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, domain: &Domain<T>, split: Split, rng: &mut R) -> Result<Episode<T>> {
        sample_episode(domain, self.ways, self.shots, self.n_query, split, rng)
    }
}

/// Seen domains feed pre-training, supernet training and search; unseen
/// domains appear only at meta-test time.
#[derive(Clone, Debug)]
pub struct Benchmark<T> {
    pub seen: Vec<Domain<T>>,
    pub unseen: Vec<Domain<T>>,
}

impl<T: Scalar> Benchmark<T> {
    /// Every domain evaluated at meta-test time, seen first.
    pub fn test_domains(&self) -> impl Iterator<Item = &Domain<T>> {
        self.seen.iter().chain(&self.unseen)
    }
}

/// Parameters of the synthetic multi-domain benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub d_in: usize,
    pub n_classes: usize,
    pub noise_min: f64,
    pub noise_max: f64,
    pub transform_scale: f64,
    pub shift_scale: f64,
    pub unseen_shift_scale: f64,
    pub max_condition: f64,
    pub split_ratio: f64,
    pub n_way_max: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_seen: 5,
            n_unseen: 2,
            d_in: 32,
            n_classes: 40,
            noise_min: 1.0,
            noise_max: 2.0,
            transform_scale: 1.0,
            shift_scale: 1.0,
            unseen_shift_scale: 1.0,
            max_condition: 4.0,
            split_ratio: 0.5,
            n_way_max: 8,
        }
    }
}

impl BenchmarkSpec {
    /// Domain specs, seen first. Noise levels are spread evenly over
    /// `[noise_min, noise_max]` across all domains.
    pub fn domain_specs(&self) -> Vec<(DomainSpec, bool)> {
        let total = self.n_seen + self.n_unseen;
        (0..total)
            .map(|i| {
                let seen = i < self.n_seen;
                let frac = if total > 1 { i as f64 / (total - 1) as f64 } else { 0.0 };
                let spec = DomainSpec {
                    id: if seen {
                        format!("seen{i}")
                    } else {
                        format!("unseen{}", i - self.n_seen)
                    },
                    n_classes: self.n_classes,
                    d_in: self.d_in,
                    noise_sigma: self.noise_min + frac * (self.noise_max - self.noise_min),
                    transform_scale: self.transform_scale,
                    shift_scale: if seen { self.shift_scale } else { self.unseen_shift_scale },
                    max_condition: self.max_condition,
                    split_ratio: self.split_ratio,
                    n_way_max: self.n_way_max,
                };
                (spec, seen)
            })
            .collect()
    }

    pub fn build<T: Scalar>(&self, seed: u64) -> Result<Benchmark<T>> {
        let mut seen = Vec::new();
        let mut unseen = Vec::new();
        for (spec, is_seen) in self.domain_specs() {
            let d = Domain::synthetic(&spec, seed)?;
            if is_seen {
                seen.push(d);
            } else {
                unseen.push(d);
            }
        }
        Ok(Benchmark { seen, unseen })
    }
}
