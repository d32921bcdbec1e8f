//! AUC, LogLoss, the short-hot / long-tail item split and the
//! feature-versus-instance KL diagnostic.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;

use crate::embedding::EncodedInstance;
use crate::error::{DdpError, Result};
use crate::nn_core::{bce, Real, PROB_EPS};
use crate::stream::PeriodStream;

/// Fraction of distinct training items treated as short-hot.
pub const HEAD_FRACTION: f64 = 0.2;

/// Cells with fewer impressions are flagged in a KL report.
pub const SPARSE_CELL_MIN: u64 = 10;

/// Parallel scores, labels and (optional) item indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<Real>,
    pub labels: Vec<u8>,
    pub items: Vec<Option<u32>>,
}

impl ScoredSet {
    pub fn new(scores: Vec<Real>, labels: Vec<u8>, items: Vec<Option<u32>>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(DdpError::LengthMismatch(scores.len(), labels.len()));
        }
        if scores.len() != items.len() {
            return Err(DdpError::LengthMismatch(scores.len(), items.len()));
        }
        Ok(ScoredSet { scores, labels, items })
    }

    /// Pairs model scores with the instances they were computed for.
    pub fn from_instances(scores: Vec<Real>, instances: &[EncodedInstance]) -> Result<Self> {
        let labels = instances.iter().map(|x| x.label).collect();
        let items = instances.iter().map(|x| x.item).collect();
        Self::new(scores, labels, items)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Subset at the given positions.
    pub fn select(&self, idx: &[usize]) -> ScoredSet {
        ScoredSet {
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            items: idx.iter().map(|&i| self.items[i]).collect(),
        }
    }
}

/// Mann–Whitney AUC with average ranks for tied scores.
pub fn auc(scores: &[Real], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DdpError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DdpError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += avg * pos as f64;
        i = j;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Mean clamped binary cross-entropy.
pub fn logloss(scores: &[Real], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DdpError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(DdpError::EmptySet);
    }
    let sum: f64 = scores.iter().zip(labels).map(|(&p, &y)| bce(p, y as Real) as f64).sum();
    Ok(sum / scores.len() as f64)
}

/// Training-stream occurrence counts per item.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemFrequency {
    pub counts: BTreeMap<u32, u64>,
}

impl ItemFrequency {
    pub fn observe(&mut self, instances: &[EncodedInstance]) -> Result<()> {
        for x in instances {
            let item = x.item.ok_or(DdpError::NoItemField)?;
            *self.counts.entry(item).or_insert(0) += 1;
        }
        Ok(())
    }

    pub fn from_instances<'a>(periods: impl IntoIterator<Item = &'a [EncodedInstance]>) -> Result<Self> {
        let mut f = ItemFrequency::default();
        for p in periods {
            f.observe(p)?;
        }
        Ok(f)
    }

    /// The top `fraction` of distinct seen items by count, ties broken by
    /// lower item index. The head size is `round(fraction · distinct)`.
    pub fn short_hot(&self, fraction: f64) -> HashSet<u32> {
        let mut ranked: Vec<(u32, u64)> = self.counts.iter().map(|(&i, &c)| (i, c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let k = (ranked.len() as f64 * fraction).round() as usize;
        ranked.into_iter().take(k).map(|(i, _)| i).collect()
    }
}

/// Positions of `instances` whose item is short-hot and the rest. Items
/// never seen in training are long-tail.
pub fn longtail_split(items: &[Option<u32>], short_hot: &HashSet<u32>) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut hot = Vec::new();
    let mut tail = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let item = item.ok_or(DdpError::NoItemField)?;
        if short_hot.contains(&item) {
            hot.push(i);
        } else {
            tail.push(i);
        }
    }
    Ok((hot, tail))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    All,
    ShortHot,
    LongTail,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Split::All => "ALL",
            Split::ShortHot => "SHORT_HOT",
            Split::LongTail => "LONG_TAIL",
        })
    }
}

/// AUC (absent when the split has a single class) and LogLoss of a split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    pub split: Split,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub n: usize,
}

fn split_metrics(split: Split, set: &ScoredSet) -> Result<SplitMetrics> {
    let auc = match auc(&set.scores, &set.labels) {
        Ok(a) => Some(a),
        Err(DdpError::DegenerateLabels) => None,
        Err(e) => return Err(e),
    };
    let logloss = if set.is_empty() { None } else { Some(logloss(&set.scores, &set.labels)?) };
    Ok(SplitMetrics {
        split,
        auc,
        logloss,
        n: set.len(),
    })
}

/// ALL metrics, plus SHORT_HOT and LONG_TAIL when a head set is given.
pub fn evaluate_splits(set: &ScoredSet, short_hot: Option<&HashSet<u32>>) -> Result<Vec<SplitMetrics>> {
    if set.is_empty() {
        return Err(DdpError::EmptySet);
    }
    let mut out = vec![split_metrics(Split::All, set)?];
    if let Some(head) = short_hot {
        let (hot, tail) = longtail_split(&set.items, head)?;
        out.push(split_metrics(Split::ShortHot, &set.select(&hot))?);
        out.push(split_metrics(Split::LongTail, &set.select(&tail))?);
    }
    Ok(out)
}

/// `Σ_i q(i)·ln(q(i)/p(i))` for binary distributions given by their
/// positive-class probabilities, each clamped into `[ε, 1 − ε]`.
pub fn kl_distance(q: f64, p: f64) -> f64 {
    let eps = PROB_EPS as f64;
    let q = q.clamp(eps, 1.0 - eps);
    let p = p.clamp(eps, 1.0 - eps);
    q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Granularity {
    Feature,
    InstanceGroup,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Granularity::Feature => "FEATURE",
            Granularity::InstanceGroup => "INSTANCE_GROUP",
        })
    }
}

/// Key of an instance group: hash of the full feature conjunction.
pub fn group_key(x: &EncodedInstance) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for field in &x.fields {
        for &k in field {
            for b in k.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn top_keys_present_everywhere(stream: &PeriodStream, k: usize, keys: impl Fn(&EncodedInstance, &mut Vec<u64>)) -> Vec<u64> {
    let mut total: HashMap<u64, u64> = HashMap::new();
    let mut periods_seen: HashMap<u64, usize> = HashMap::new();
    let mut buf = Vec::new();
    for period in stream.periods() {
        let mut here = HashSet::new();
        for x in period {
            buf.clear();
            keys(x, &mut buf);
            for &key in &buf {
                *total.entry(key).or_insert(0) += 1;
                here.insert(key);
            }
        }
        for key in here {
            *periods_seen.entry(key).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(u64, u64)> = total
        .into_iter()
        .filter(|(key, _)| periods_seen[key] == stream.len())
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(key, _)| key).collect()
}

/// The `k` most frequent feature values that occur in every period.
pub fn top_features(stream: &PeriodStream, k: usize) -> Vec<u32> {
    top_keys_present_everywhere(stream, k, |x, out| out.extend(x.fields.iter().flatten().map(|&v| v as u64)))
        .into_iter()
        .map(|v| v as u32)
        .collect()
}

/// The `k` most frequent instance groups that occur in every period.
pub fn top_groups(stream: &PeriodStream, k: usize) -> Vec<u64> {
    top_keys_present_everywhere(stream, k, |x, out| out.push(group_key(x)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlRow {
    pub period: usize,
    pub key: u64,
    pub granularity: Granularity,
    pub kl: f64,
    pub impressions: u64,
}

/// Per-period KL between each key's in-period CTR and its CTR pooled over
/// all periods.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KlReport {
    pub rows: Vec<KlRow>,
}

impl KlReport {
    /// Cells with fewer than [`SPARSE_CELL_MIN`] impressions.
    pub fn sparse_cells(&self) -> Vec<&KlRow> {
        self.rows.iter().filter(|r| r.impressions < SPARSE_CELL_MIN).collect()
    }

    /// Mean KL across keys for each period.
    pub fn series(&self, g: Granularity) -> Vec<f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.granularity == g) {
            let e = acc.entry(r.period).or_insert((0.0, 0));
            e.0 += r.kl;
            e.1 += 1;
        }
        acc.into_values().map(|(s, n)| s / n as f64).collect()
    }

    /// Mean of the per-period series.
    pub fn mean(&self, g: Granularity) -> f64 {
        let s = self.series(g);
        if s.is_empty() {
            0.0
        } else {
            s.iter().sum::<f64>() / s.len() as f64
        }
    }

    /// Per-key KL series for one granularity, in period order.
    pub fn key_series(&self, g: Granularity, key: u64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.granularity == g && r.key == key)
            .map(|r| r.kl)
            .collect()
    }

    /// `period,key,granularity,kl,impressions` CSV.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["period", "key", "granularity", "kl", "impressions"])?;
        for r in &self.rows {
            w.write_record([
                r.period.to_string(),
                r.key.to_string(),
                r.granularity.to_string(),
                r.kl.to_string(),
                r.impressions.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Builds the KL report for the chosen feature values (global indices) and
/// instance groups (see [`group_key`]). Keys absent from a period give a
/// row with zero impressions and KL 0, which shows up as a sparse cell.
pub fn kl_report(stream: &PeriodStream, features: &[u32], groups: &[u64]) -> KlReport {
    let t = stream.len();
    let feat_pos: HashMap<u32, usize> = features.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    let group_pos: HashMap<u64, usize> = groups.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    // [period][key] → (impressions, clicks)
    let mut feat = vec![vec![(0u64, 0u64); features.len()]; t];
    let mut grp = vec![vec![(0u64, 0u64); groups.len()]; t];
    for (p, period) in stream.periods().iter().enumerate() {
        for x in period {
            let y = x.label as u64;
            for &v in x.fields.iter().flatten() {
                if let Some(&i) = feat_pos.get(&v) {
                    feat[p][i].0 += 1;
                    feat[p][i].1 += y;
                }
            }
            if let Some(&i) = group_pos.get(&group_key(x)) {
                grp[p][i].0 += 1;
                grp[p][i].1 += y;
            }
        }
    }
    let mut report = KlReport::default();
    let mut emit = |g: Granularity, keys: Vec<u64>, cells: &[Vec<(u64, u64)>]| {
        for (i, &key) in keys.iter().enumerate() {
            let (n, c) = cells.iter().fold((0, 0), |a, row| (a.0 + row[i].0, a.1 + row[i].1));
            let pooled = if n == 0 { 0.0 } else { c as f64 / n as f64 };
            for (p, row) in cells.iter().enumerate() {
                let (ni, ci) = row[i];
                let kl = if ni == 0 { 0.0 } else { kl_distance(ci as f64 / ni as f64, pooled) };
                report.rows.push(KlRow {
                    period: p + 1,
                    key,
                    granularity: g,
                    kl,
                    impressions: ni,
                });
            }
        }
    };
    emit(Granularity::Feature, features.iter().map(|&f| f as u64).collect(), &feat);
    emit(Granularity::InstanceGroup, groups.to_vec(), &grp);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Schema;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(s: &[Real], y: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.3; 7], &[0, 1, 1, 0, 1, 0, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.3, 0.4], &[1, 1]), Err(DdpError::DegenerateLabels)));
        assert!(matches!(auc(&[0.3], &[1, 0]), Err(DdpError::LengthMismatch(1, 2))));
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = 300;
            let s: Vec<Real> = (0..n).map(|_| (rng.gen_range(0..40) as Real) / 40.0).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.3) as u8).collect();
            assert!((auc(&s, &y).unwrap() - pairwise_auc(&s, &y)).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_to_monotone_transform(
            raw in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..60)
        ) {
            let s: Vec<Real> = raw.iter().map(|r| r.0 as Real).collect();
            let y: Vec<u8> = raw.iter().map(|r| r.1 as u8).collect();
            prop_assume!(y.contains(&0) && y.contains(&1));
            let t: Vec<Real> = s.iter().map(|v| v * v * v + 2.0).collect();
            prop_assert_eq!(auc(&s, &y).unwrap(), auc(&t, &y).unwrap());
        }

        #[test]
        fn kl_is_non_negative(q in 0.0f64..1.0, p in 0.0f64..1.0) {
            prop_assert!(kl_distance(q, p) >= -1e-15);
        }
    }

    #[test]
    fn logloss_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((logloss(&[0.5; 4], &[0, 1, 1, 0]).unwrap() - ln2).abs() < 1e-12);
        assert!((logloss(&[1.0, 0.0], &[1, 0]).unwrap() - 1e-7).abs() < 1e-12);
        assert!(matches!(logloss(&[], &[]), Err(DdpError::EmptySet)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<Real> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<u8> = (0..500).map(|_| rng.gen_bool(0.5) as u8).collect();
        let mut acc = 0.0f64;
        for i in 0..500 {
            let p = (s[i] as f64).clamp(1e-7, 1.0 - 1e-7);
            acc -= if y[i] == 1 { p.ln() } else { (1.0 - p).ln() };
        }
        assert!((logloss(&s, &y).unwrap() - acc / 500.0).abs() <= 1e-12);
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_distance(0.3, 0.3), 0.0);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_distance(0.5, 0.75) - expected).abs() < 1e-12);
        assert!((expected - 0.1438).abs() < 1e-4);
        assert_ne!(kl_distance(0.5, 0.75), kl_distance(0.75, 0.5));
        assert!(kl_distance(0.0, 1.0).is_finite());
    }

    #[test]
    fn short_hot_tie_rule_and_unseen_items() {
        let mut f = ItemFrequency::default();
        for i in 0..10u32 {
            f.counts.insert(i, 5);
        }
        let head = f.short_hot(HEAD_FRACTION);
        assert_eq!(head, HashSet::from([0, 1]));
        let (hot, tail) = longtail_split(&[Some(1), Some(7), Some(99), Some(0)], &head).unwrap();
        assert_eq!(hot, vec![0, 3]);
        assert_eq!(tail, vec![1, 2]);
        assert!(matches!(longtail_split(&[None], &head), Err(DdpError::NoItemField)));
    }

    #[test]
    fn skewed_items_split_near_eight_to_two() {
        // 100 items: 20 popular ones carry 80% of the traffic.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draw = |rng: &mut ChaCha8Rng| -> u32 {
            if rng.gen_bool(0.8) {
                rng.gen_range(0..20)
            } else {
                rng.gen_range(20..100)
            }
        };
        let mut f = ItemFrequency::default();
        for _ in 0..50_000 {
            *f.counts.entry(draw(&mut rng)).or_insert(0) += 1;
        }
        let head = f.short_hot(HEAD_FRACTION);
        let test: Vec<Option<u32>> = (0..20_000).map(|_| Some(draw(&mut rng))).collect();
        let (hot, tail) = longtail_split(&test, &head).unwrap();
        assert_eq!(hot.len() + tail.len(), test.len());
        let ratio = hot.len() as f64 / test.len() as f64;
        assert!((ratio - 0.8).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn evaluate_splits_partitions() {
        let set = ScoredSet::new(
            vec![0.9, 0.2, 0.7, 0.4, 0.6, 0.1],
            vec![1, 0, 1, 0, 0, 1],
            vec![Some(0), Some(0), Some(1), Some(1), Some(2), Some(2)],
        )
        .unwrap();
        let head = HashSet::from([0]);
        let m = evaluate_splits(&set, Some(&head)).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[0].n, 6);
        assert_eq!(m[1].n + m[2].n, 6);
        assert_eq!(m[1].auc, Some(1.0));
        let single = ScoredSet::new(vec![0.3], vec![1], vec![Some(0)]).unwrap();
        assert_eq!(evaluate_splits(&single, None).unwrap()[0].auc, None);
        assert!(matches!(evaluate_splits(&ScoredSet::default(), None), Err(DdpError::EmptySet)));
    }

    fn stream_from(periods: Vec<Vec<(u32, u32, u8)>>) -> PeriodStream {
        let s = Schema::one_hot(&[4, 4]).unwrap();
        let mut id = 0;
        PeriodStream::new(
            periods
                .into_iter()
                .map(|p| {
                    p.into_iter()
                        .map(|(a, b, y)| {
                            id += 1;
                            EncodedInstance::new(&s, id, vec![vec![a], vec![4 + b]], y).unwrap()
                        })
                        .collect()
                })
                .collect(),
        )
    }

    #[test]
    fn kl_report_by_hand() {
        // Feature 0 has CTR 1/2 in period 1 and 1/4 in period 2.
        let s = stream_from(vec![
            vec![(0, 0, 1), (0, 1, 0)],
            vec![(0, 0, 1), (0, 1, 0), (0, 1, 0), (0, 1, 0)],
        ]);
        let r = kl_report(&s, &[0], &[]);
        let pooled = 2.0 / 6.0;
        let f = r.key_series(Granularity::Feature, 0);
        assert!((f[0] - kl_distance(0.5, pooled)).abs() < 1e-15);
        assert!((f[1] - kl_distance(0.25, pooled)).abs() < 1e-15);
        assert_eq!(r.sparse_cells().len(), 2);
        assert_eq!(top_features(&s, 1), vec![0]);
        let g = top_groups(&s, 5);
        assert_eq!(g.len(), 2);
        let r = kl_report(&s, &[], &g);
        assert_eq!(r.series(Granularity::InstanceGroup).len(), 2);
        // Group (0, 0) always clicks: zero KL.
        let always = group_key(&s.period(1).unwrap()[0]);
        assert_eq!(r.key_series(Granularity::InstanceGroup, always), vec![0.0, 0.0]);
    }

    #[test]
    fn kl_csv_has_header_and_rows() {
        let s = stream_from(vec![vec![(0, 0, 1)], vec![(0, 0, 0)]]);
        let r = kl_report(&s, &[0, 4], &[]);
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("period,key,granularity,kl,impressions\n"));
        assert_eq!(text.lines().count(), 1 + 4);
    }
}
