//! Few-shot readout: class centroids, cosine distance, the prototypical
//! loss and nearest-centroid accuracy.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `1 − u·v / (‖u‖‖v‖)`; 1 when either vector has zero norm.
pub fn cosine_distance<T: Scalar>(u: &[T], v: &[T]) -> T {
    debug_assert_eq!(u.len(), v.len());
    let (mut dot, mut uu, mut vv) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in u.iter().zip(v) {
        dot = dot + a * b;
        uu = uu + a * a;
        vv = vv + b * b;
    }
    if uu == T::zero() || vv == T::zero() {
        return T::one();
    }
    T::one() - dot / (uu * vv).sqrt()
}

/// One mean embedding per support label, labels ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet<T> {
    pub labels: Vec<usize>,
    pub centroids: Tensor<T>,
}

impl<T: Scalar> CentroidSet<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: usize) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    fn require_readout(&self, query_emb: &Tensor<T>, query_labels: &[usize]) -> Result<Vec<usize>> {
        if self.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "readout needs at least 2 centroids, got {}",
                self.len()
            )));
        }
        if query_emb.rows() != query_labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} query embeddings but {} labels",
                query_emb.rows(),
                query_labels.len()
            )));
        }
        if query_labels.is_empty() {
            return Err(Error::InvalidArgument("empty query set".into()));
        }
        if query_emb.cols() != self.centroids.cols() {
            return Err(Error::InvalidArgument(format!(
                "query dim {} vs centroid dim {}",
                query_emb.cols(),
                self.centroids.cols()
            )));
        }
        query_labels
            .iter()
            .map(|&l| {
                self.index_of(l).ok_or_else(|| {
                    Error::InvalidArgument(format!("query label {l} has no centroid"))
                })
            })
            .collect()
    }
}

/// Groups row indices by label, labels ascending.
fn group_rows(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(row);
    }
    groups
}

pub fn class_centroids<T: Scalar>(embeddings: &Tensor<T>, labels: &[usize]) -> Result<CentroidSet<T>> {
    if labels.is_empty() || embeddings.rows() == 0 {
        return Err(Error::InvalidArgument("no support embeddings".into()));
    }
    if embeddings.rows() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings but {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    let d = embeddings.cols();
    let groups = group_rows(labels);
    let mut data = Vec::with_capacity(groups.len() * d);
    for rows in groups.values() {
        let inv = T::one() / T::from_usize_lossy(rows.len());
        let mut acc = vec![T::zero(); d];
        for &r in rows {
            for (a, &v) in acc.iter_mut().zip(embeddings.row(r)) {
                *a = *a + v;
            }
        }
        data.extend(acc.into_iter().map(|v| v * inv));
    }
    Ok(CentroidSet {
        labels: groups.keys().copied().collect(),
        centroids: Tensor::matrix(groups.len(), d, data)?,
    })
}

fn log_softmax_nll<T: Scalar>(logits: &[T], target: usize) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
    lse - logits[target]
}

/// Mean negative log-softmax of `−d_cos(centroid, query)` at the true class.
pub fn proto_loss<T: Scalar>(query_emb: &Tensor<T>, query_labels: &[usize], c: &CentroidSet<T>) -> Result<T> {
    let targets = c.require_readout(query_emb, query_labels)?;
    let mut total = T::zero();
    let mut logits = vec![T::zero(); c.len()];
    for (i, &t) in targets.iter().enumerate() {
        for (j, z) in logits.iter_mut().enumerate() {
            *z = -cosine_distance(c.centroids.row(j), query_emb.row(i));
        }
        total = total + log_softmax_nll(&logits, t);
    }
    Ok(total / T::from_usize_lossy(targets.len()))
}

/// Fraction of queries whose nearest centroid (cosine distance, ties to the
/// lowest label) carries the true label.
pub fn ncc_accuracy<T: Scalar>(query_emb: &Tensor<T>, query_labels: &[usize], c: &CentroidSet<T>) -> Result<T> {
    let targets = c.require_readout(query_emb, query_labels)?;
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| nearest_centroid(c, query_emb.row(i)) == t)
        .count();
    Ok(T::from_usize_lossy(correct) / T::from_usize_lossy(targets.len()))
}

/// Index of the closest centroid; the first one wins ties.
pub fn nearest_centroid<T: Scalar>(c: &CentroidSet<T>, q: &[T]) -> usize {
    let mut best = 0;
    let mut best_d = T::infinity();
    for j in 0..c.len() {
        let d = cosine_distance(c.centroids.row(j), q);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Support/query partition of the rows of one embedding matrix.
///
/// `query_rows` may repeat `support_rows` (the support-on-support objective
/// used during fine-tuning).
#[derive(Clone, Debug)]
pub struct EpisodeRows<'a> {
    pub support_rows: &'a [usize],
    pub support_labels: &'a [usize],
    pub query_rows: &'a [usize],
    pub query_labels: &'a [usize],
}

/// Prototypical loss on an embedding matrix together with its gradient
/// with respect to every row. Gradients flow through the queries and,
/// via the class means, through the support rows.
pub fn proto_loss_with_grad<T: Scalar>(emb: &Tensor<T>, rows: &EpisodeRows<'_>) -> Result<(T, Tensor<T>)> {
    let support = emb.select_rows(rows.support_rows);
    let c = class_centroids(&support, rows.support_labels)?;
    let query = emb.select_rows(rows.query_rows);
    let targets = c.require_readout(&query, rows.query_labels)?;

    let d = emb.cols();
    let l = c.len();
    let m = T::from_usize_lossy(targets.len());
    let norms_c: Vec<T> = (0..l).map(|j| norm(c.centroids.row(j))).collect();

    let mut grad = Tensor::zeros(vec![emb.rows(), d]);
    let mut grad_c = vec![T::zero(); l * d];
    let mut total = T::zero();
    let mut cos = vec![T::zero(); l];
    let mut logits = vec![T::zero(); l];

    for (i, &t) in targets.iter().enumerate() {
        let e = query.row(i);
        let ne = norm(e);
        for j in 0..l {
            cos[j] = if ne == T::zero() || norms_c[j] == T::zero() {
                T::zero()
            } else {
                dot(c.centroids.row(j), e) / (ne * norms_c[j])
            };
            logits[j] = cos[j] - T::one();
        }
        total = total + log_softmax_nll(&logits, t);

        let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = logits.iter().map(|&v| (v - mx).exp()).sum();
        let ge = grad.row_mut(rows.query_rows[i]);
        for j in 0..l {
            if ne == T::zero() || norms_c[j] == T::zero() {
                continue;
            }
            let p = (logits[j] - mx).exp() / z;
            let dz = (p - if j == t { T::one() } else { T::zero() }) / m;
            let cj = c.centroids.row(j);
            let inv = T::one() / (ne * norms_c[j]);
            let ce = cos[j] / (ne * ne);
            let cc = cos[j] / (norms_c[j] * norms_c[j]);
            let gc = &mut grad_c[j * d..(j + 1) * d];
            for k in 0..d {
                ge[k] = ge[k] + dz * (cj[k] * inv - ce * e[k]);
                gc[k] = gc[k] + dz * (e[k] * inv - cc * cj[k]);
            }
        }
    }

    let groups = group_rows(rows.support_labels);
    for (j, members) in groups.values().enumerate() {
        let inv = T::one() / T::from_usize_lossy(members.len());
        for &s in members {
            let g = grad.row_mut(rows.support_rows[s]);
            for (gv, &cv) in g.iter_mut().zip(&grad_c[j * d..(j + 1) * d]) {
                *gv = *gv + cv * inv;
            }
        }
    }
    Ok((total / m, grad))
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cosine_distance_cases() {
        assert_eq!(cosine_distance(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0]), 0.0);
        assert_eq!(cosine_distance(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0]), 0.5);
        assert_eq!(cosine_distance(&[0.0, 0.0, 0.0], &[1.0, 0.0, 1.0]), 1.0);
        assert_eq!(cosine_distance(&[1.0, 2.0], &[-1.0, -2.0]), 2.0);
    }

    #[test]
    fn one_shot_centroid_is_the_sample() {
        let e = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let c = class_centroids(&e, &[7, 2]).unwrap();
        assert_eq!(c.labels, vec![2, 7]);
        assert_eq!(c.centroids.row(0), &[3.0, 4.0]);
        assert_eq!(c.centroids.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn centroid_is_arithmetic_mean() {
        let e = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = class_centroids(&e, &[0, 0]).unwrap();
        assert_eq!(c.centroids.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn centroids_ignore_row_order() {
        let e = t(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0], &[4.0, -1.0]]);
        let a = class_centroids(&e, &[0, 1, 0, 1]).unwrap();
        let p = e.select_rows(&[3, 2, 1, 0]);
        let b = class_centroids(&p, &[1, 0, 1, 0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_support_is_an_error() {
        let e = Tensor::<f64>::zeros(vec![0, 3]);
        assert!(class_centroids(&e, &[]).is_err());
    }

    #[test]
    fn equidistant_two_class_loss_is_ln2() {
        let c = class_centroids(&t(&[&[1.0, 0.0], &[0.0, 1.0]]), &[0, 1]).unwrap();
        let q = t(&[&[1.0, 1.0]]);
        let l = proto_loss(&q, &[0], &c).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn true_at_distance_zero_other_at_one() {
        // d_true = 0, d_other = 1 ⇒ −log(1/(1+e^{−1})) = log(1+e^{−1})
        let c = class_centroids(&t(&[&[1.0, 0.0], &[0.0, 1.0]]), &[0, 1]).unwrap();
        let q = t(&[&[2.0, 0.0]]);
        let l = proto_loss(&q, &[0], &c).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn three_equal_distances_give_ln3() {
        let c = class_centroids(
            &t(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]),
            &[0, 1, 2],
        )
        .unwrap();
        let q = t(&[&[1.0, 1.0, 1.0]]);
        let l = proto_loss(&q, &[2], &c).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn missing_centroid_is_an_error() {
        let c = class_centroids(&t(&[&[1.0, 0.0], &[0.0, 1.0]]), &[0, 1]).unwrap();
        let q = t(&[&[1.0, 1.0]]);
        assert!(proto_loss(&q, &[5], &c).is_err());
        assert!(ncc_accuracy(&q, &[5], &c).is_err());
    }

    #[test]
    fn ncc_simple_cases() {
        let s = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = class_centroids(&s, &[0, 1]).unwrap();
        assert_eq!(ncc_accuracy(&t(&[&[1.0, 0.0]]), &[0], &c).unwrap(), 1.0);
        assert_eq!(ncc_accuracy(&t(&[&[0.0, 1.0]]), &[0], &c).unwrap(), 0.0);
        // exact tie goes to the lower label
        assert_eq!(ncc_accuracy(&t(&[&[1.0, 1.0]]), &[0], &c).unwrap(), 1.0);
        assert_eq!(ncc_accuracy(&t(&[&[1.0, 1.0]]), &[1], &c).unwrap(), 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let emb = t(&[
            &[0.3, -1.2, 0.8],
            &[1.1, 0.4, -0.2],
            &[-0.5, 0.9, 0.7],
            &[0.2, 0.1, -1.3],
            &[0.9, -0.3, 0.4],
        ]);
        let support_rows = [0, 1, 2];
        let support_labels = [0, 1, 0];
        let query_rows = [3, 4, 1];
        let query_labels = [1, 0, 1];
        let rows = EpisodeRows {
            support_rows: &support_rows,
            support_labels: &support_labels,
            query_rows: &query_rows,
            query_labels: &query_labels,
        };
        let (_, g) = proto_loss_with_grad(&emb, &rows).unwrap();
        let eps = 1e-6;
        for k in 0..emb.len() {
            let mut p = emb.clone();
            p.data_mut()[k] += eps;
            let mut m = emb.clone();
            m.data_mut()[k] -= eps;
            let fd = (proto_loss_with_grad(&p, &rows).unwrap().0
                - proto_loss_with_grad(&m, &rows).unwrap().0)
                / (2.0 * eps);
            assert!((fd - g.data()[k]).abs() < 1e-8, "coord {k}: {fd} vs {}", g.data()[k]);
        }
    }
}
