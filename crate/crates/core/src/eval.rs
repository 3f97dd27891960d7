//! Open-world evaluation: Hungarian matching, accuracy, NMI, head usage, and
//! a K-means reference clustering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Minimum-cost injective row→column map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Column per row; `None` for rows sent to a zero-cost padding column
    /// (only possible when there are more rows than columns).
    pub columns: Vec<Option<usize>>,
    pub total_cost: f64,
}

/// Shortest-augmenting-path Hungarian algorithm with potentials on a square
/// `k × k` matrix. Returns the column for each row and the optimal duals
/// `(u, v)`, with `u[i] + v[j] ≤ cost[i][j]` everywhere and equality on the
/// returned matching.
fn solve_square(cost: &[f64], k: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let inf = f64::INFINITY;
    // 1-based, column 0 is a sentinel.
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * k + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0usize; k];
    for j in 1..=k {
        cols[p[j] - 1] = j - 1;
    }
    (cols, u[1..].to_vec(), v[1..].to_vec())
}

/// Minimum-cost assignment of rows to distinct columns.
///
/// When `n > k` the matrix is padded with zero-cost columns and rows landing
/// there get `None`. Among optimal assignments the lexicographically smallest
/// column sequence is returned: rows are fixed in order to the smallest column
/// that still admits an optimal completion.
pub fn hungarian_min_cost(cost: &Matrix) -> Result<Assignment> {
    let (n, k0) = cost.shape();
    if n == 0 || k0 == 0 {
        return Err(Error::usage("assignment on an empty cost matrix"));
    }
    if !cost.is_finite() {
        return Err(Error::usage("cost matrix contains non-finite entries"));
    }
    // Square zero padding: extra columns absorb surplus rows, extra rows come
    // last so they never affect the order of the real ones.
    let k = k0.max(n);
    let mut padded = vec![0.0; k * k];
    for r in 0..n {
        padded[r * k..r * k + k0].copy_from_slice(cost.row(r));
    }
    let (mut col_of, u, v) = solve_square(&padded, k);

    // Optimal assignments are exactly the perfect matchings on tight edges.
    let scale = padded.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale;
    let tight = |r: usize, c: usize| padded[r * k + c] - u[r] - v[c] <= tol;
    let mut row_of = vec![0usize; k];
    for (r, &c) in col_of.iter().enumerate() {
        row_of[c] = r;
    }

    let mut parent = vec![usize::MAX; k];
    let mut queue = Vec::with_capacity(k);
    for r in 0..n {
        // Columns row r could take while later rows re-route along
        // alternating paths of tight edges back to col_of[r].
        parent.fill(usize::MAX);
        let home = col_of[r];
        parent[home] = home;
        queue.clear();
        queue.push(home);
        let mut head = 0;
        while head < queue.len() {
            let g = queue[head];
            head += 1;
            for (rr, &c) in col_of.iter().enumerate().skip(r + 1) {
                if parent[c] == usize::MAX && tight(rr, g) {
                    parent[c] = g;
                    queue.push(c);
                }
            }
        }
        let target = (0..k).find(|&c| parent[c] != usize::MAX && tight(r, c)).unwrap_or(home);
        let mut moves = Vec::new();
        let mut c = target;
        while c != home {
            moves.push((row_of[c], parent[c]));
            c = parent[c];
        }
        for (owner, next) in moves {
            col_of[owner] = next;
            row_of[next] = owner;
        }
        col_of[r] = target;
        row_of[target] = r;
    }

    let columns: Vec<Option<usize>> = col_of[..n].iter().map(|&c| (c < k0).then_some(c)).collect();
    let total_cost = columns
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| cost.get(r, c)))
        .sum();
    Ok(Assignment { columns, total_cost })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedAccuracy {
    pub accuracy: f64,
    pub matched: usize,
    /// `(prediction id, label id)` pairs chosen by the matching.
    pub matching: Vec<(usize, usize)>,
}

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::usage(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::usage("metric over zero rows"));
    }
    Ok(())
}

/// Accuracy under the best one-to-one map from prediction ids to label ids.
pub fn matched_accuracy(preds: &[usize], labels: &[usize]) -> Result<MatchedAccuracy> {
    check_lengths(preds, labels)?;
    let pred_ids: Vec<usize> = preds.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let label_ids: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&p, &y) in preds.iter().zip(labels) {
        *counts.entry((p, y)).or_insert(0) += 1;
    }
    let count = |p: usize, y: usize| counts.get(&(p, y)).copied().unwrap_or(0) as f64;

    let preds_are_rows = pred_ids.len() <= label_ids.len();
    let (rows, cols) = if preds_are_rows {
        (&pred_ids, &label_ids)
    } else {
        (&label_ids, &pred_ids)
    };
    let mut cost = Matrix::zeros(rows.len(), cols.len());
    for (i, &a) in rows.iter().enumerate() {
        for (j, &b) in cols.iter().enumerate() {
            let c = if preds_are_rows { count(a, b) } else { count(b, a) };
            cost.set(i, j, -c);
        }
    }
    let assignment = hungarian_min_cost(&cost)?;
    let mut matching = Vec::new();
    let mut matched = 0usize;
    for (i, col) in assignment.columns.iter().enumerate() {
        let Some(j) = *col else { continue };
        let (p, y) = if preds_are_rows {
            (rows[i], cols[j])
        } else {
            (cols[j], rows[i])
        };
        matched += count(p, y) as usize;
        matching.push((p, y));
    }
    matching.sort_unstable();
    Ok(MatchedAccuracy {
        accuracy: matched as f64 / preds.len() as f64,
        matched,
        matching,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmiNormalization {
    /// `MI / ((H(A) + H(B)) / 2)`.
    #[default]
    Arithmetic,
    /// `MI / sqrt(H(A) · H(B))`.
    Geometric,
}

/// Normalized mutual information with the arithmetic-mean normalizer.
pub fn nmi(preds: &[usize], labels: &[usize]) -> Result<f64> {
    nmi_with(preds, labels, NmiNormalization::Arithmetic)
}

pub fn nmi_with(preds: &[usize], labels: &[usize], norm: NmiNormalization) -> Result<f64> {
    check_lengths(preds, labels)?;
    let n = preds.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&a, &b) in preds.iter().zip(labels) {
        *joint.entry((a, b)).or_insert(0.0) += 1.0;
        *pa.entry(a).or_insert(0.0) += 1.0;
        *pb.entry(b).or_insert(0.0) += 1.0;
    }
    let entropy = |m: &BTreeMap<usize, f64>| -> f64 {
        m.values().map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
    };
    let ha = entropy(&pa);
    let hb = entropy(&pb);
    let mi: f64 = joint
        .iter()
        .map(|(&(a, b), &c)| {
            let p = c / n;
            p * (p / ((pa[&a] / n) * (pb[&b] / n))).ln()
        })
        .sum();
    let denom = match norm {
        NmiNormalization::Arithmetic => 0.5 * (ha + hb),
        NmiNormalization::Geometric => (ha * hb).sqrt(),
    };
    if denom <= 0.0 || mi <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Seen / novel / all metrics on the evaluated (unlabeled) rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seen_accuracy: f64,
    pub novel_accuracy: f64,
    pub novel_nmi: f64,
    pub all_accuracy: f64,
    /// Rows predicted into each head.
    pub head_counts: Vec<usize>,
    /// Novel heads receiving at least the threshold fraction of rows.
    pub active_novel_heads: usize,
}

pub const DEFAULT_HEAD_COUNT_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub head_count_threshold: f64,
    pub nmi_normalization: NmiNormalization,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            head_count_threshold: DEFAULT_HEAD_COUNT_THRESHOLD,
            nmi_normalization: NmiNormalization::Arithmetic,
        }
    }
}

/// Builds an [`EvalReport`].
///
/// Seen accuracy counts a row correct iff it lands in the head bound to its
/// class (`seen_classes[h]` ↔ head `h`). Novel accuracy and NMI use rows whose
/// class is not seen, with Hungarian matching. All-class accuracy is one joint,
/// unconstrained Hungarian matching over every row. Metrics over an empty
/// subset are reported as 0.
pub fn open_world_report(
    preds: &[usize],
    labels: &[usize],
    seen_classes: &[usize],
    num_heads: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    check_lengths(preds, labels)?;
    let num_seen_heads = seen_classes.len();
    if num_seen_heads > num_heads {
        return Err(Error::usage(format!(
            "{num_seen_heads} seen classes but only {num_heads} heads"
        )));
    }
    if let Some(&p) = preds.iter().find(|&&p| p >= num_heads) {
        return Err(Error::usage(format!("prediction {p} out of range for {num_heads} heads")));
    }
    let seen_head = |y: usize| seen_classes.iter().position(|&c| c == y);

    let mut seen_total = 0usize;
    let mut seen_correct = 0usize;
    let mut novel_preds = Vec::new();
    let mut novel_labels = Vec::new();
    for (&p, &y) in preds.iter().zip(labels) {
        match seen_head(y) {
            Some(h) => {
                seen_total += 1;
                seen_correct += usize::from(p == h);
            }
            None => {
                novel_preds.push(p);
                novel_labels.push(y);
            }
        }
    }
    let seen_accuracy = if seen_total > 0 {
        seen_correct as f64 / seen_total as f64
    } else {
        0.0
    };
    let (novel_accuracy, novel_nmi) = if novel_preds.is_empty() {
        (0.0, 0.0)
    } else {
        (
            matched_accuracy(&novel_preds, &novel_labels)?.accuracy,
            nmi_with(&novel_preds, &novel_labels, cfg.nmi_normalization)?,
        )
    };
    let all_accuracy = matched_accuracy(preds, labels)?.accuracy;

    let mut head_counts = vec![0usize; num_heads];
    for &p in preds {
        head_counts[p] += 1;
    }
    let min_rows = cfg.head_count_threshold * preds.len() as f64;
    let active_novel_heads = head_counts[num_seen_heads..]
        .iter()
        .filter(|&&c| c > 0 && c as f64 >= min_rows)
        .count();

    Ok(EvalReport {
        seen_accuracy,
        novel_accuracy,
        novel_nmi,
        all_accuracy,
        head_counts,
        active_novel_heads,
    })
}

impl fmt::Display for EvalReport {
    /// Aligned Seen / Novel / All table.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>8} {:>8}", "metric", "Seen", "Novel", "All")?;
        writeln!(
            f,
            "{:<10} {:>8.4} {:>8.4} {:>8.4}",
            "accuracy", self.seen_accuracy, self.novel_accuracy, self.all_accuracy
        )?;
        writeln!(f, "{:<10} {:>8} {:>8.4} {:>8}", "nmi", "-", self.novel_nmi, "-")?;
        write!(
            f,
            "active novel heads: {}  head counts: {:?}",
            self.active_novel_heads, self.head_counts
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    /// Inertia after every assignment step of the returned restart.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest
/// inertia wins (ties to the earliest restart).
pub fn kmeans(
    features: &Matrix,
    k: usize,
    max_iters: usize,
    restarts: usize,
    rng: &mut Rng,
) -> Result<KMeansResult> {
    let n = features.rows();
    if k == 0 {
        return Err(Error::usage("k must be at least 1"));
    }
    if k > n {
        return Err(Error::usage(format!("k = {k} exceeds the number of rows ({n})")));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(features, k, max_iters, rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_init(x: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = x.rows();
    let mut centroids = Matrix::zeros(k, x.cols());
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let pick = rng.weighted_index(&d2);
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), centroids.row(c)));
        }
    }
    centroids
}

fn assign(x: &Matrix, centroids: &Matrix, out: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, slot) in out.iter_mut().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..centroids.rows() {
            let d = sq_dist(x.row(i), centroids.row(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        *slot = best;
        inertia += best_d;
    }
    inertia
}

fn lloyd(x: &Matrix, k: usize, max_iters: usize, rng: &mut Rng) -> KMeansResult {
    let (n, d) = x.shape();
    let mut centroids = plus_plus_init(x, k, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut next = vec![0usize; n];
    let mut history = Vec::new();
    let mut inertia = assign(x, &centroids, &mut next);
    history.push(inertia);
    for _ in 0..max_iters.max(1) {
        let changed = next != assignments;
        std::mem::swap(&mut assignments, &mut next);
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed from the point farthest from its own centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(x.row(a), centroids.row(assignments[a]));
                        let db = sq_dist(x.row(b), centroids.row(assignments[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n >= k >= 1");
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
                let row = x.row(far).to_vec();
                centroids.row_mut(c).copy_from_slice(&row);
            }
        }
        inertia = assign(x, &centroids, &mut next);
        history.push(inertia);
    }
    KMeansResult {
        assignments: next,
        centroids,
        inertia,
        history,
    }
}
