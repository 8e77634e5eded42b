//! Entity-marked token sequences and the bidirectional recurrent context
//! encoder that produces entity-pair representations.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

pub const E1_START: usize = 0;
pub const E1_END: usize = 1;
pub const E2_START: usize = 2;
pub const E2_END: usize = 3;
pub const UNK: usize = 4;
pub const RESERVED: [&str; 5] = ["[E1_start]", "[E1_end]", "[E2_start]", "[E2_end]", "[UNK]"];

/// Longest accepted marked sequence (tokens plus the four markers).
pub const MAX_MARKED_LEN: usize = 128;

/// Half-open token range `[start, end)`, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// A sentence with two marked entities and, when known, its relation index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationMention {
    pub tokens: Vec<String>,
    pub e1: Span,
    pub e2: Span,
    pub gold_label: Option<usize>,
}

impl RelationMention {
    pub fn new(tokens: Vec<String>, e1: Span, e2: Span, gold_label: Option<usize>) -> Self {
        Self { tokens, e1, e2, gold_label }
    }

    /// Checks span bounds, ordering and length limits.
    pub fn validate(&self) -> Result<()> {
        let t = self.tokens.len();
        for (name, s) in [("e1", self.e1), ("e2", self.e2)] {
            if s.start >= s.end || s.end > t {
                return Err(Error::Span(format!(
                    "{name} span [{}, {}) invalid for {t} tokens",
                    s.start, s.end
                )));
            }
        }
        if self.e1.overlaps(&self.e2) {
            return Err(Error::Span(format!(
                "entity spans [{}, {}) and [{}, {}) overlap",
                self.e1.start, self.e1.end, self.e2.start, self.e2.end
            )));
        }
        if t + 4 > MAX_MARKED_LEN {
            return Err(Error::Span(format!("{t} tokens exceed the maximum of {}", MAX_MARKED_LEN - 4)));
        }
        Ok(())
    }

    /// Copy with the gold label removed.
    pub fn unlabeled(&self) -> Self {
        Self { gold_label: None, ..self.clone() }
    }
}

/// Dense token→id map with five reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds a vocabulary whose non-reserved tokens are sorted.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a RelationMention>) -> Result<Self> {
        let mut seen = false;
        let mut set = BTreeSet::new();
        for m in corpus {
            seen = true;
            for t in &m.tokens {
                if !RESERVED.contains(&t.as_str()) {
                    set.insert(t.clone());
                }
            }
        }
        if !seen {
            return Err(Error::EmptyCorpus);
        }
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(set).collect();
        Ok(tokens.into())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`] when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Token ids with the four entity markers inserted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedSequence {
    pub token_ids: Vec<usize>,
    pub e1_start_pos: usize,
    pub e2_start_pos: usize,
}

impl MarkedSequence {
    /// The sequence without its marker ids.
    pub fn strip_markers(&self) -> Vec<usize> {
        self.token_ids.iter().copied().filter(|&id| id > E2_END).collect()
    }
}

/// Inserts `[E1_start] … [E1_end]` and `[E2_start] … [E2_end]` around the
/// entity spans, keeping the original token order.
pub fn insert_entity_markers(m: &RelationMention, vocab: &Vocabulary) -> Result<MarkedSequence> {
    m.validate()?;
    let mut ids = Vec::with_capacity(m.tokens.len() + 4);
    let (mut p1, mut p2) = (0, 0);
    for i in 0..=m.tokens.len() {
        if i == m.e1.end {
            ids.push(E1_END);
        }
        if i == m.e2.end {
            ids.push(E2_END);
        }
        if i == m.e1.start {
            p1 = ids.len();
            ids.push(E1_START);
        }
        if i == m.e2.start {
            p2 = ids.len();
            ids.push(E2_START);
        }
        if let Some(tok) = m.tokens.get(i) {
            ids.push(vocab.id(tok));
        }
    }
    Ok(MarkedSequence { token_ids: ids, e1_start_pos: p1, e2_start_pos: p2 })
}

/// Encoder weights, generic over storage so the same layout holds tensors
/// and graph handles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<T> {
    /// V × d_emb
    pub embedding: T,
    /// d_emb × h_R/2
    pub fwd_wx: T,
    /// h_R/2 × h_R/2
    pub fwd_wh: T,
    /// 1 × h_R/2
    pub fwd_b: T,
    pub bwd_wx: T,
    pub bwd_wh: T,
    pub bwd_b: T,
}

impl<T> EncoderParams<T> {
    pub const NAMES: [&'static str; 7] =
        ["embedding", "fwd_wx", "fwd_wh", "fwd_b", "bwd_wx", "bwd_wh", "bwd_b"];

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [&self.embedding, &self.fwd_wx, &self.fwd_wh, &self.fwd_b, &self.bwd_wx, &self.bwd_wh, &self.bwd_b]
            .into_iter()
    }

    pub fn take_from(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            embedding: it.next()?,
            fwd_wx: it.next()?,
            fwd_wh: it.next()?,
            fwd_b: it.next()?,
            bwd_wx: it.next()?,
            bwd_wh: it.next()?,
            bwd_b: it.next()?,
        })
    }
}

/// Runs one recurrent direction over `order`, returning the states at the
/// positions listed in `keep` (in the same order as `keep`).
fn run_direction(
    g: &mut Graph,
    projected: Var,
    wh: Var,
    b: Var,
    order: impl Iterator<Item = usize>,
    keep: [usize; 2],
) -> Result<[Option<Var>; 2]> {
    let mut state: Option<Var> = None;
    let mut out = [None, None];
    for t in order {
        let x = g.gather_rows(projected, &[t])?;
        let mut pre = g.add(x, b)?;
        if let Some(prev) = state {
            let rec = g.matmul(prev, wh)?;
            pre = g.add(pre, rec)?;
        }
        let s = g.tanh(pre);
        for (k, &pos) in keep.iter().enumerate() {
            if pos == t {
                out[k] = Some(s);
            }
        }
        state = Some(s);
        if out.iter().all(Option::is_some) {
            break;
        }
    }
    Ok(out)
}

/// Pair representation `[h_e1_start, h_e2_start]` (1 × 2·h_R) for a marked
/// sequence, differentiable in every encoder parameter.
pub fn encode(g: &mut Graph, seq: &MarkedSequence, p: &EncoderParams<Var>) -> Result<Var> {
    let vocab_size = g.value(p.embedding).dims2()?.0;
    if let Some(&bad) = seq.token_ids.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::Vocab { id: bad, size: vocab_size });
    }
    let len = seq.token_ids.len();
    let keep = [seq.e1_start_pos, seq.e2_start_pos];
    if keep.iter().any(|&k| k >= len) {
        return Err(Error::Span("marker position outside sequence".into()));
    }
    let emb = g.gather_rows(p.embedding, &seq.token_ids)?;

    let fwd_proj = g.matmul(emb, p.fwd_wx)?;
    let fwd = run_direction(g, fwd_proj, p.fwd_wh, p.fwd_b, 0..len, keep)?;
    let bwd_proj = g.matmul(emb, p.bwd_wx)?;
    let bwd = run_direction(g, bwd_proj, p.bwd_wh, p.bwd_b, (0..len).rev(), keep)?;

    let mut halves = Vec::with_capacity(2);
    for k in 0..2 {
        let (f, b) = (fwd[k].expect("visited"), bwd[k].expect("visited"));
        halves.push(g.concat_cols(f, b)?);
    }
    g.concat_cols(halves[0], halves[1])
}
