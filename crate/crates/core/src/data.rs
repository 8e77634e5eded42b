//! Datasets, JSONL interchange, stratified splitting and unlabeled batching.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{RelationMention, Span};
use crate::error::{Error, Result};

/// Mentions plus the relation label inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub mentions: Vec<RelationMention>,
    pub label_names: Vec<String>,
    pub no_relation_index: Option<usize>,
}

impl Dataset {
    pub fn new(mentions: Vec<RelationMention>, label_names: Vec<String>, no_relation_index: Option<usize>) -> Result<Self> {
        let d = Self { mentions, label_names, no_relation_index };
        d.validate()?;
        Ok(d)
    }

    pub fn classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.label_names.len();
        let mut names = self.label_names.clone();
        names.sort();
        names.dedup();
        if names.len() != k {
            return Err(Error::Config("label names must be unique".into()));
        }
        if let Some(nr) = self.no_relation_index {
            if nr >= k {
                return Err(Error::Config(format!("no_relation index {nr} out of {k} labels")));
            }
        }
        for m in &self.mentions {
            if let Some(l) = m.gold_label {
                if l >= k {
                    return Err(Error::Label(format!("label index {l} with {k} labels")));
                }
            }
        }
        Ok(())
    }

    /// Per-class mention counts (unlabeled mentions are not counted).
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes()];
        for m in &self.mentions {
            if let Some(l) = m.gold_label {
                h[l] += 1;
            }
        }
        h
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRecord {
    tokens: Vec<String>,
    e1: [usize; 2],
    e2: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relation: Option<String>,
}

/// Reads one mention per line: `{"tokens":[…],"e1":[s,e],"e2":[s,e],"relation":"name"}`.
/// Blank lines are skipped; `relation` may be absent for unlabeled data.
pub fn load_jsonl(path: &Path, label_names: &[String], no_relation_index: Option<usize>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_jsonl(BufReader::new(file), label_names, no_relation_index)
}

pub fn read_jsonl(reader: impl BufRead, label_names: &[String], no_relation_index: Option<usize>) -> Result<Dataset> {
    let index: BTreeMap<&str, usize> = label_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut mentions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let gold = match rec.relation {
            Some(name) => Some(*index.get(name.as_str()).ok_or(Error::Label(name))?),
            None => None,
        };
        let m = RelationMention::new(rec.tokens, Span::from(rec.e1), Span::from(rec.e2), gold);
        m.validate().map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        mentions.push(m);
    }
    Dataset::new(mentions, label_names.to_vec(), no_relation_index)
}

pub fn save_jsonl(d: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(d, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn write_jsonl(d: &Dataset, w: &mut impl Write) -> Result<()> {
    for m in &d.mentions {
        let rec = JsonlRecord {
            tokens: m.tokens.clone(),
            e1: m.e1.into(),
            e2: m.e2.into(),
            relation: m.gold_label.map(|l| d.label_names[l].clone()),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Labeled and unlabeled shares of a training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub labeled_fraction: f64,
    pub unlabeled_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !(self.labeled_fraction > 0.0 && ok(self.labeled_fraction)) || !ok(self.unlabeled_fraction) {
            return Err(Error::Split(format!(
                "fractions out of range: labeled {}, unlabeled {}",
                self.labeled_fraction, self.unlabeled_fraction
            )));
        }
        if self.labeled_fraction + self.unlabeled_fraction > 1.0 + 1e-12 {
            return Err(Error::Split("labeled + unlabeled fractions exceed 1".into()));
        }
        Ok(())
    }
}

/// Hidden gold labels of unlabeled mentions, kept for diagnostics only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShadowGold(Vec<usize>);

impl ShadowGold {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn get(&self, index: usize) -> Option<usize> {
        self.0.get(index).copied()
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Unlabeled mentions with their labels stripped; the gold labels live in a
/// separate [`ShadowGold`] aligned by index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlabeledPool {
    mentions: Vec<RelationMention>,
    shadow: ShadowGold,
}

impl UnlabeledPool {
    /// Strips labels from gold-labeled mentions.
    pub fn from_labeled(mentions: Vec<RelationMention>) -> Result<Self> {
        let mut shadow = Vec::with_capacity(mentions.len());
        let mut stripped = Vec::with_capacity(mentions.len());
        for m in mentions {
            shadow.push(m.gold_label.ok_or_else(|| Error::Split("unlabeled pool needs gold labels for diagnostics".into()))?);
            stripped.push(m.unlabeled());
        }
        Ok(Self { mentions: stripped, shadow: ShadowGold(shadow) })
    }

    /// The training-facing view: no gold labels.
    pub fn mentions(&self) -> &[RelationMention] {
        &self.mentions
    }

    pub fn shadow(&self) -> &ShadowGold {
        &self.shadow
    }

    pub fn len(&self) -> usize {
        self.mentions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mentions.is_empty()
    }

    /// Mentions re-joined with their shadow labels.
    pub fn relabeled(&self) -> Vec<RelationMention> {
        self.mentions
            .iter()
            .zip(self.shadow.labels())
            .map(|(m, &l)| RelationMention { gold_label: Some(l), ..m.clone() })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub labeled: Vec<RelationMention>,
    pub unlabeled: UnlabeledPool,
    pub rest: Vec<RelationMention>,
}

/// Largest-remainder apportionment of `total` over `quotas`, never giving a
/// class more than its cap. Ties go to the lower class index.
pub(crate) fn apportion(quotas: &[f64], caps: &[usize], total: usize) -> Vec<usize> {
    let mut alloc: Vec<usize> = quotas.iter().zip(caps).map(|(&q, &c)| (q.floor() as usize).min(c)).collect();
    let mut left = total.saturating_sub(alloc.iter().sum());
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    while left > 0 {
        let mut progressed = false;
        for &k in &order {
            if left == 0 {
                break;
            }
            if alloc[k] < caps[k] {
                alloc[k] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    alloc
}

/// Mixes a seed with a stream id (splitmix64 finalizer).
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Groups mentions by class in a canonical (input-order independent) order,
/// then shuffles each class with a per-class seeded stream.
fn shuffled_classes(mentions: &[RelationMention], labels: &[usize], classes: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (c, members) in by_class.iter_mut().enumerate() {
        members.sort_by(|&a, &b| mentions[a].cmp(&mentions[b]));
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, c as u64 + 1));
        members.shuffle(&mut rng);
    }
    by_class
}

/// Stratified labeled / unlabeled / rest split with per-class
/// largest-remainder allocation.
pub fn stratified_split(d: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let labels: Vec<usize> = d
        .mentions
        .iter()
        .map(|m| m.gold_label.ok_or_else(|| Error::Split("every mention needs a gold label".into())))
        .collect::<Result<_>>()?;
    let counts = d.histogram();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Split(format!("class {:?} has no mentions", d.label_names[c])));
    }
    let n = d.mentions.len();
    let lab_total = ((spec.labeled_fraction * n as f64).round() as usize).min(n);
    let lab_quota: Vec<f64> = counts.iter().map(|&c| spec.labeled_fraction * c as f64).collect();
    let lab = apportion(&lab_quota, &counts, lab_total);
    if let Some(c) = lab.iter().position(|&k| k == 0) {
        return Err(Error::Split(format!(
            "class {:?} has too few mentions ({}) for a labeled fraction of {}",
            d.label_names[c], counts[c], spec.labeled_fraction
        )));
    }
    let remaining: Vec<usize> = counts.iter().zip(&lab).map(|(c, l)| c - l).collect();
    let unl_total = ((spec.unlabeled_fraction * n as f64).round() as usize).min(remaining.iter().sum());
    let unl_quota: Vec<f64> = counts.iter().map(|&c| spec.unlabeled_fraction * c as f64).collect();
    let unl = apportion(&unl_quota, &remaining, unl_total);

    let classes = shuffled_classes(&d.mentions, &labels, d.classes(), spec.seed);
    let (mut labeled, mut unlabeled, mut rest) = (Vec::new(), Vec::new(), Vec::new());
    for (c, members) in classes.iter().enumerate() {
        for (k, &i) in members.iter().enumerate() {
            let m = d.mentions[i].clone();
            if k < lab[c] {
                labeled.push(m);
            } else if k < lab[c] + unl[c] {
                unlabeled.push(m);
            } else {
                rest.push(m);
            }
        }
    }
    Ok(Split { labeled, unlabeled: UnlabeledPool::from_labeled(unlabeled)?, rest })
}

/// Splits the pool into `batches` disjoint, near-equal batches that share the
/// pool's gold label distribution.
pub fn partition_unlabeled(pool: &UnlabeledPool, batches: usize, seed: u64) -> Result<Vec<UnlabeledPool>> {
    if batches == 0 || batches > pool.len() {
        return Err(Error::Split(format!("cannot divide {} unlabeled mentions into {batches} batches", pool.len())));
    }
    if batches == 1 {
        return Ok(vec![pool.clone()]);
    }
    let labels = pool.shadow.labels();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let order: Vec<usize> = shuffled_classes(&pool.mentions, labels, classes, seed).into_iter().flatten().collect();
    let mut out: Vec<(Vec<RelationMention>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); batches];
    for (k, i) in order.into_iter().enumerate() {
        let (ms, ls) = &mut out[k % batches];
        ms.push(pool.mentions[i].clone());
        ls.push(labels[i]);
    }
    Ok(out.into_iter().map(|(mentions, l)| UnlabeledPool { mentions, shadow: ShadowGold(l) }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| if i == 0 { "no_relation".to_string() } else { format!("r{i}") }).collect()
    }

    fn mention(i: usize, label: usize) -> RelationMention {
        RelationMention::new(
            vec![format!("a{i}"), "x".into(), format!("b{}", i % 7)],
            Span::new(0, 1),
            Span::new(2, 3),
            Some(label),
        )
    }

    fn dataset(counts: &[usize]) -> Dataset {
        let mut ms = Vec::new();
        let mut i = 0;
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                ms.push(mention(i, c));
                i += 1;
            }
        }
        Dataset::new(ms, names(counts.len()), Some(0)).unwrap()
    }

    fn hist(ms: &[RelationMention], k: usize) -> Vec<usize> {
        let mut h = vec![0; k];
        for m in ms {
            h[m.gold_label.unwrap()] += 1;
        }
        h
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let d = read_jsonl(&b""[..], &names(2), Some(0)).unwrap();
        assert!(d.mentions.is_empty());
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut d = dataset(&[1, 1, 1]);
        d.mentions[1].gold_label = None;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_jsonl(&d, &p).unwrap();
        assert_eq!(load_jsonl(&p, &d.label_names, d.no_relation_index).unwrap(), d);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"tokens":["a0","x","b0"],"e1":[0,1],"e2":[2,3],"relation":"no_relation"}"#);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let text = "{\"tokens\":[\"a\",\"b\",\"c\"],\"e1\":[0,1],\"e2\":[1,2]}\n{\"tokens\":[\"a\",\"b\",\"c\"],\"e1\":[2,1],\"e2\":[0,1]}\n";
        match read_jsonl(text.as_bytes(), &names(2), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let text = "{\"tokens\":[\"a\"],\n";
        assert!(matches!(read_jsonl(text.as_bytes(), &names(2), None), Err(Error::Parse { line: 1, .. })));
        let text = "{\"tokens\":[\"a\",\"b\"],\"e1\":[0,1],\"e2\":[1,2],\"relation\":\"nope\"}\n";
        assert!(matches!(read_jsonl(text.as_bytes(), &names(2), None), Err(Error::Label(_))));
    }

    #[test]
    fn full_labeled_split_is_identity() {
        let d = dataset(&[3, 4, 5]);
        let s = stratified_split(&d, &SplitSpec { labeled_fraction: 1.0, unlabeled_fraction: 0.0, seed: 1 }).unwrap();
        let mut a = s.labeled.clone();
        let mut b = d.mentions.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(s.unlabeled.is_empty() && s.rest.is_empty());
    }

    #[test]
    fn exact_stratification() {
        let d = dataset(&[10, 10]);
        let s = stratified_split(&d, &SplitSpec { labeled_fraction: 0.5, unlabeled_fraction: 0.3, seed: 4 }).unwrap();
        assert_eq!(hist(&s.labeled, 2), vec![5, 5]);
        assert_eq!(hist(&s.unlabeled.relabeled(), 2), vec![3, 3]);
        assert_eq!(s.rest.len(), 4);
        assert!(s.unlabeled.mentions().iter().all(|m| m.gold_label.is_none()));
        for m in s.unlabeled.relabeled() {
            assert!(!s.labeled.contains(&m));
        }
    }

    #[test]
    fn split_errors() {
        let d = dataset(&[10, 1]);
        let spec = SplitSpec { labeled_fraction: 0.1, unlabeled_fraction: 0.5, seed: 0 };
        assert!(matches!(stratified_split(&d, &spec), Err(Error::Split(_))));
        let d = dataset(&[10, 0]);
        assert!(matches!(stratified_split(&d, &SplitSpec { labeled_fraction: 0.5, ..spec }), Err(Error::Split(_))));
        let d = dataset(&[10, 10]);
        assert!(stratified_split(&d, &SplitSpec { labeled_fraction: 0.7, unlabeled_fraction: 0.5, seed: 0 }).is_err());
        assert!(stratified_split(&d, &SplitSpec { labeled_fraction: 0.0, unlabeled_fraction: 0.5, seed: 0 }).is_err());
    }

    #[test]
    fn partition_shapes() {
        let d = dataset(&[40, 30, 30]);
        let pool = UnlabeledPool::from_labeled(d.mentions.clone()).unwrap();
        let one = partition_unlabeled(&pool, 1, 3).unwrap();
        assert_eq!(one, vec![pool.clone()]);
        let ten = partition_unlabeled(&pool, 10, 3).unwrap();
        assert!(ten.iter().all(|b| b.len() == 10));
        for b in &ten {
            assert_eq!(hist(&b.relabeled(), 3), vec![4, 3, 3]);
        }
        let mut all: Vec<_> = ten.iter().flat_map(|b| b.relabeled()).collect();
        let mut orig = d.mentions.clone();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert!(matches!(partition_unlabeled(&pool, 101, 0), Err(Error::Split(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn labeled_histogram_tracks_population(
            counts in prop::collection::vec(5usize..40, 2..6),
            frac in 0.2f64..0.6,
            seed in any::<u64>(),
        ) {
            let d = dataset(&counts);
            let s = stratified_split(&d, &SplitSpec { labeled_fraction: frac, unlabeled_fraction: 0.3, seed }).unwrap();
            let h = hist(&s.labeled, counts.len());
            for (c, &n) in counts.iter().enumerate() {
                let q = frac * n as f64;
                prop_assert!((h[c] as f64) >= q.floor() && (h[c] as f64) <= q.ceil());
            }
            let total = s.labeled.len() + s.unlabeled.len() + s.rest.len();
            prop_assert_eq!(total, d.mentions.len());
        }

        #[test]
        fn split_is_permutation_stable(
            counts in prop::collection::vec(3usize..15, 2..4),
            seed in any::<u64>(),
            shuffle_seed in any::<u64>(),
        ) {
            let d = dataset(&counts);
            let mut shuffled = d.clone();
            shuffled.mentions.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            let spec = SplitSpec { labeled_fraction: 0.4, unlabeled_fraction: 0.4, seed };
            let a = stratified_split(&d, &spec).unwrap();
            let b = stratified_split(&shuffled, &spec).unwrap();
            let sorted = |mut v: Vec<RelationMention>| { v.sort(); v };
            prop_assert_eq!(sorted(a.labeled), sorted(b.labeled));
            prop_assert_eq!(sorted(a.unlabeled.relabeled()), sorted(b.unlabeled.relabeled()));
            prop_assert_eq!(sorted(a.rest), sorted(b.rest));
        }

        #[test]
        fn batches_share_pool_distribution(
            counts in prop::collection::vec(1usize..30, 2..5),
            batches in 1usize..8,
            seed in any::<u64>(),
        ) {
            let d = dataset(&counts);
            prop_assume!(d.mentions.len() >= batches);
            let pool = UnlabeledPool::from_labeled(d.mentions.clone()).unwrap();
            let parts = partition_unlabeled(&pool, batches, seed).unwrap();
            prop_assert_eq!(parts.len(), batches);
            let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for p in &parts {
                let h = hist(&p.relabeled(), counts.len());
                for (c, &n) in counts.iter().enumerate() {
                    let q = n as f64 / batches as f64;
                    prop_assert!((h[c] as f64) >= q.floor() && (h[c] as f64) <= q.ceil());
                }
            }
        }
    }
}
