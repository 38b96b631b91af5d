//! Connectionist temporal classification: loss and gradient by the
//! forward-backward recursion over the blank-extended label, an exhaustive
//! path-enumeration oracle, and greedy best-path decoding.
//!
//! The blank is always the last class: with `n` symbols the per-frame
//! distribution has `n + 1` entries and the blank index is `n`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Ordered set of distinct codepoints. Class `i < len()` is `symbols[i]`; the
/// blank class is `len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::VocabularyMismatch(format!(
                    "symbol {c:?} listed twice"
                )));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Sorted distinct codepoints appearing in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<char> = texts.into_iter().flat_map(str::chars).collect();
        set.sort_unstable();
        set.dedup();
        Self::new(set).expect("deduplicated")
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Number of symbols `n`, excluding the blank.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank(&self) -> usize {
        self.symbols.len()
    }

    /// `n + 1`, the width of every probability row.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.index.get(&c).copied().ok_or(Error::UnknownSymbol(c)))
            .collect()
    }

    /// Maps class indices back to text. Blank and out-of-range indices are skipped.
    pub fn decode(&self, classes: &[usize]) -> String {
        classes
            .iter()
            .filter_map(|&i| self.symbols.get(i))
            .collect()
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }
}

/// Per-frame class probabilities, shape `(T, n + 1)`, rows summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitSequence(Tensor);

const ROW_SUM_TOLERANCE: f64 = 1e-9;

impl LogitSequence {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "probabilities must be (T, classes), got {:?}",
                probs.shape()
            )));
        }
        let classes = probs.shape()[1];
        for (t, row) in probs.data().chunks(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "frame {t} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(Self(probs))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn blank(&self) -> usize {
        self.classes() - 1
    }

    pub fn probs(&self) -> &Tensor {
        &self.0
    }

    fn row(&self, t: usize) -> &[f64] {
        let c = self.classes();
        &self.0.data()[t * c..(t + 1) * c]
    }
}

/// Minimum frame count able to emit `label`: one per symbol plus a blank
/// between each pair of equal neighbours.
pub fn required_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Removes repeated classes, then blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

fn check_label(probs: &LogitSequence, label: &[usize]) -> Result<()> {
    if let Some(&k) = label.iter().find(|&&k| k >= probs.blank()) {
        return Err(Error::InvalidArgument(format!(
            "label class {k} is not a symbol of a {}-class distribution",
            probs.classes()
        )));
    }
    let required = required_frames(label);
    if required > probs.frames() {
        return Err(Error::Unalignable {
            required,
            available: probs.frames(),
        });
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

struct Lattice {
    /// Blank-extended label `l'`.
    ext: Vec<usize>,
    /// log α̃: log-probability of reaching state s at frame t, excluding y_t.
    alpha_in: Vec<f64>,
    /// log β̃: log-probability of finishing from state s at frame t, excluding y_t.
    beta_out: Vec<f64>,
    log_likelihood: f64,
}

fn lattice(probs: &LogitSequence, label: &[usize]) -> Lattice {
    let blank = probs.blank();
    let t_len = probs.frames();
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(blank);
    for &k in label {
        ext.push(k);
        ext.push(blank);
    }
    let s_len = ext.len();
    let skip_allowed = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let logy = |t: usize, s: usize| probs.row(t)[ext[s]].ln();

    let ninf = f64::NEG_INFINITY;
    let mut alpha_in = vec![ninf; t_len * s_len];
    let mut alpha = vec![ninf; t_len * s_len];
    for s in 0..s_len.min(2) {
        alpha_in[s] = 0.0;
        alpha[s] = logy(0, s);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_allowed(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha_in[t * s_len + s] = acc;
            alpha[t * s_len + s] = acc + logy(t, s);
        }
    }

    let mut beta_out = vec![ninf; t_len * s_len];
    let mut beta = vec![ninf; t_len * s_len];
    let last = t_len - 1;
    for s in s_len.saturating_sub(2)..s_len {
        beta_out[last * s_len + s] = 0.0;
        beta[last * s_len + s] = logy(last, s);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip_allowed(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            beta_out[t * s_len + s] = acc;
            beta[t * s_len + s] = acc + logy(t, s);
        }
    }

    let mut log_likelihood = alpha[last * s_len + s_len - 1];
    if s_len >= 2 {
        log_likelihood = log_add(log_likelihood, alpha[last * s_len + s_len - 2]);
    }
    Lattice {
        ext,
        alpha_in,
        beta_out,
        log_likelihood,
    }
}

/// Negative log-likelihood of `label` under `probs`, summed over every frame
/// path that collapses to it. `+∞` when all such paths have zero probability.
pub fn ctc_loss(probs: &LogitSequence, label: &[usize]) -> Result<f64> {
    check_label(probs, label)?;
    Ok(-lattice(probs, label).log_likelihood)
}

/// Loss together with its gradient with respect to every probability entry.
pub fn ctc_loss_and_grad(probs: &LogitSequence, label: &[usize]) -> Result<(f64, Tensor)> {
    check_label(probs, label)?;
    let lat = lattice(probs, label);
    if !lat.log_likelihood.is_finite() {
        return Err(Error::NonFinite(
            "label has zero probability under these frames".into(),
        ));
    }
    let (t_len, classes) = (probs.frames(), probs.classes());
    let s_len = lat.ext.len();
    let mut grad = vec![0.0; t_len * classes];
    // ∂P/∂y_t(k) = Σ_{s: l'_s = k} α̃_t(s)·β̃_t(s), so ∂(−ln P)/∂y = −that / P.
    for t in 0..t_len {
        for s in 0..s_len {
            let lp = lat.alpha_in[t * s_len + s] + lat.beta_out[t * s_len + s];
            if lp > f64::NEG_INFINITY {
                grad[t * classes + lat.ext[s]] -= (lp - lat.log_likelihood).exp();
            }
        }
    }
    Ok((
        -lat.log_likelihood,
        Tensor::from_parts(vec![t_len, classes], grad),
    ))
}

pub fn ctc_grad(probs: &LogitSequence, label: &[usize]) -> Result<Tensor> {
    ctc_loss_and_grad(probs, label).map(|(_, g)| g)
}

/// Records the CTC loss of `label` on the `(T, n + 1)` probabilities held by
/// `probs` as a scalar node of `g`.
pub fn ctc_loss_node(g: &mut Graph, probs: Var, label: &[usize]) -> Result<Var> {
    let seq = LogitSequence::new(g.value(probs).clone())?;
    let (loss, grad) = ctc_loss_and_grad(&seq, label)?;
    g.precomputed(probs, loss, grad)
}

pub const BRUTE_FORCE_MAX_FRAMES: usize = 8;
pub const BRUTE_FORCE_MAX_CLASSES: usize = 5;

/// Probability of `label` obtained by enumerating all `(n+1)^T` frame paths.
/// Exponential; bounded to `T ≤ max_frames` (at most 8) and `n + 1 ≤ 5`.
pub fn ctc_brute_force(probs: &LogitSequence, label: &[usize], max_frames: usize) -> Result<f64> {
    let (t_len, classes) = (probs.frames(), probs.classes());
    let max_frames = max_frames.min(BRUTE_FORCE_MAX_FRAMES);
    if t_len > max_frames || classes > BRUTE_FORCE_MAX_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "enumeration bound exceeded: T = {t_len} (max {max_frames}), classes = {classes} (max {BRUTE_FORCE_MAX_CLASSES})"
        )));
    }
    let blank = probs.blank();
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    loop {
        if collapse(&path, blank) == label {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| probs.row(t)[k])
                .product::<f64>();
        }
        // odometer increment
        let mut i = t_len;
        loop {
            if i == 0 {
                return Ok(total);
            }
            i -= 1;
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Greedy decoding: per-frame argmax (lowest index on ties), then collapse.
pub fn best_path_decode(probs: &Tensor) -> Vec<usize> {
    let classes = probs.shape()[probs.rank() - 1];
    let path: Vec<usize> = probs
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect();
    collapse(&path, classes - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[&[f64]]) -> LogitSequence {
        let c = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        LogitSequence::new(Tensor::from_slice(&[rows.len(), c], &data)).unwrap()
    }

    #[test]
    fn certain_single_path() {
        let p = seq(&[&[1.0, 0.0]]);
        assert_eq!(ctc_loss(&p, &[0]).unwrap(), 0.0);
        let g = ctc_grad(&p, &[0]).unwrap();
        assert_eq!(g.data(), &[-1.0, 0.0]);
    }

    #[test]
    fn two_uniform_frames() {
        // paths (a,-), (-,a), (a,a) out of four, each 1/4
        let p = seq(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let loss = ctc_loss(&p, &[0]).unwrap();
        assert!((loss - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert!((ctc_brute_force(&p, &[0], 8).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn repeats_need_a_separating_blank() {
        let p = seq(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(matches!(
            ctc_loss(&p, &[0, 0]),
            Err(Error::Unalignable {
                required: 3,
                available: 2
            })
        ));
        assert!(matches!(
            ctc_grad(&p, &[0, 0]),
            Err(Error::Unalignable { .. })
        ));
        assert_eq!(required_frames(&[0, 0, 1, 1, 1]), 8);
    }

    #[test]
    fn empty_label_all_blank() {
        let p = seq(&[&[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(ctc_brute_force(&p, &[], 8).unwrap(), 1.0);
        assert_eq!(ctc_loss(&p, &[]).unwrap(), 0.0);
    }

    #[test]
    fn decode_collapse_rules() {
        let onehot = |path: &[usize]| {
            let mut d = vec![0.0; path.len() * 3];
            for (t, &k) in path.iter().enumerate() {
                d[t * 3 + k] = 1.0;
            }
            Tensor::from_slice(&[path.len(), 3], &d)
        };
        // classes: a = 0, b = 1, blank = 2
        assert_eq!(best_path_decode(&onehot(&[2, 2])), Vec::<usize>::new());
        assert_eq!(best_path_decode(&onehot(&[0, 0, 2, 1])), vec![0, 1]);
        assert_eq!(best_path_decode(&onehot(&[0, 2, 0])), vec![0, 0]);
        // ties go to the lowest index
        assert_eq!(
            best_path_decode(&Tensor::from_slice(&[1, 3], &[0.4, 0.4, 0.2])),
            vec![0]
        );
    }

    #[test]
    fn vocabulary_round_trip() {
        let v = Vocabulary::from_texts(["bca", "éa"]);
        assert_eq!(v.symbols(), &['a', 'b', 'c', 'é']);
        assert_eq!(v.blank(), 4);
        let enc = v.encode("cé").unwrap();
        assert_eq!(v.decode(&enc), "cé");
        assert!(matches!(v.encode("z"), Err(Error::UnknownSymbol('z'))));
        assert!(Vocabulary::new("aa".chars()).is_err());
    }

    #[test]
    fn rejects_non_distribution_rows() {
        assert!(LogitSequence::new(Tensor::from_slice(&[1, 2], &[0.7, 0.7])).is_err());
        assert!(LogitSequence::new(Tensor::from_slice(&[1, 2], &[1.5, -0.5])).is_err());
    }
}
