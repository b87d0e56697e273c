//! Evaluation metrics. Functions returning `Option` yield `None` when the
//! metric is undefined for the input (for example a single class).

/// Mann–Whitney AUROC: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Average precision with step interpolation over distinct score
/// thresholds, highest first.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut last_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            seen += 1;
            tp += labels[k] as usize;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - last_recall) * tp as f64 / seen as f64;
        last_recall = recall;
        i = j + 1;
    }
    Some(ap)
}

/// Binary F1; undefined when there are no positives and no predicted
/// positives.
pub fn f1(pred: &[bool], labels: &[bool]) -> Option<f64> {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        return None;
    }
    Some(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Mean of the defined values; `None` when none is defined.
pub fn macro_mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.into_iter().flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Per-column metric over row-major `[n, k]` scores and labels,
/// macro-averaged over columns where it is defined.
pub fn multilabel<F>(scores: &[Vec<f64>], labels: &[Vec<bool>], metric: F) -> Option<f64>
where
    F: Fn(&[f64], &[bool]) -> Option<f64>,
{
    let k = labels.first().map_or(0, Vec::len);
    macro_mean((0..k).map(|c| {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        metric(&s, &l)
    }))
}

/// Per-bin F1 at threshold 0.5, macro-averaged.
pub fn multilabel_f1(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> Option<f64> {
    multilabel(probs, labels, |s, l| {
        let pred: Vec<bool> = s.iter().map(|&p| p >= 0.5).collect();
        f1(&pred, l)
    })
}

/// Macro F1 over the classes that occur in labels or predictions.
pub fn macro_f1(pred: &[usize], labels: &[usize], classes: usize) -> f64 {
    macro_mean((0..classes).map(|c| {
        let p: Vec<bool> = pred.iter().map(|&x| x == c).collect();
        let l: Vec<bool> = labels.iter().map(|&x| x == c).collect();
        f1(&p, &l)
    }))
    .unwrap_or(0.0)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// One-vs-rest AUPRC from class probabilities, macro-averaged.
pub fn macro_auprc(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Option<f64> {
    macro_mean((0..classes).map(|c| {
        let s: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|&x| x == c).collect();
        auprc(&s, &l)
    }))
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Mean absolute error over all elements.
pub fn mae(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.iter().zip(t) {
            s += (a - b).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Row-wise cosine similarity averaged over rows; zero rows count as 0.
pub fn mean_cosine(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
            let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt();
            if np > 0.0 && nt > 0.0 {
                dot / (np * nt)
            } else {
                0.0
            }
        })
        .sum();
    total / pred.len() as f64
}
