//! Synthetic nested-entity corpora.
//!
//! Every type `t` owns eight words: two each for the begin, inside, end and
//! single-token roles. Words past `8 |T|` are fillers. A type occurs at most
//! once per sentence, neighbouring mentions are separated by at least one
//! filler, and an inner mention sits strictly inside its outer mention, so
//! gold never crosses and the boundaries are recoverable from local context.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Entity, Sentence};
use crate::error::{Error, Result};

const WORDS_PER_TYPE: usize = 8;
const MIN_OUTER_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_entity_len: usize,
    /// Target fraction of mentions that overlap another mention.
    pub nesting_rate: f64,
    pub num_types: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 50,
            sentences: 1000,
            min_len: 5,
            max_len: 15,
            max_entity_len: 5,
            nesting_rate: 0.3,
            num_types: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_types == 0 {
            return err("num_types must be positive".into());
        }
        if self.vocab_size <= WORDS_PER_TYPE * self.num_types {
            return err(format!(
                "vocab_size {} leaves no filler words for {} types (need more than {})",
                self.vocab_size,
                self.num_types,
                WORDS_PER_TYPE * self.num_types
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return err(format!("invalid sentence length range {}..={}", self.min_len, self.max_len));
        }
        if self.max_entity_len == 0 || self.max_entity_len > self.min_len {
            return err(format!(
                "max_entity_len {} must lie in 1..={} (the shortest sentence)",
                self.max_entity_len, self.min_len
            ));
        }
        if !(0.0..=1.0).contains(&self.nesting_rate) {
            return err(format!("nesting_rate {} is outside [0, 1]", self.nesting_rate));
        }
        if self.nesting_rate > 0.0 && (self.max_entity_len < MIN_OUTER_LEN || self.num_types < 2) {
            return err(format!(
                "nesting needs max_entity_len >= {MIN_OUTER_LEN} and at least 2 types"
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn type_name(t: usize) -> String {
        format!("T{t}")
    }
}

#[derive(Debug, Clone, Copy)]
enum Role {
    Begin = 0,
    Inside = 1,
    End = 2,
    Single = 3,
}

fn word(rng: &mut ChaCha8Rng, t: usize, role: Role) -> usize {
    t * WORDS_PER_TYPE + role as usize * 2 + rng.random_range(0..2)
}

struct Mention {
    ty: usize,
    len: usize,
    /// `(type, length, offset inside the outer mention)`.
    inner: Option<(usize, usize, usize)>,
}

fn min_len(m: &Mention) -> usize {
    if m.inner.is_some() {
        MIN_OUTER_LEN
    } else {
        1
    }
}

fn paint(tokens: &mut [usize], rng: &mut ChaCha8Rng, start: usize, len: usize, t: usize) {
    if len == 1 {
        tokens[start] = word(rng, t, Role::Single);
        return;
    }
    tokens[start] = word(rng, t, Role::Begin);
    for tok in &mut tokens[start + 1..start + len - 1] {
        *tok = word(rng, t, Role::Inside);
    }
    tokens[start + len - 1] = word(rng, t, Role::End);
}

fn sentence(cfg: &SynthConfig, rng: &mut ChaCha8Rng, nest_prob: f64) -> Sentence {
    let n = rng.random_range(cfg.min_len..=cfg.max_len);
    let mut types: Vec<usize> = (0..cfg.num_types).collect();
    types.shuffle(rng);
    let max_top = (cfg.num_types - 1).max(1);
    let top = rng.random_range(1..=max_top);

    let mut mentions: Vec<Mention> = Vec::with_capacity(top);
    let mut spare = types[top..].iter().copied();
    for &ty in &types[..top] {
        let nested = nest_prob > 0.0 && rng.random_bool(nest_prob);
        let inner_ty = if nested { spare.next() } else { None };
        let len = match inner_ty {
            Some(_) => rng.random_range(MIN_OUTER_LEN..=cfg.max_entity_len),
            None => rng.random_range(1..=cfg.max_entity_len),
        };
        mentions.push(Mention {
            ty,
            len,
            inner: inner_ty.map(|u| (u, 0, 0)),
        });
    }

    // Shrink the longest shrinkable mention, then drop flat mentions, until
    // everything fits with one filler between neighbours.
    let needed = |ms: &[Mention]| ms.iter().map(|m| m.len).sum::<usize>() + ms.len().saturating_sub(1);
    while needed(&mentions) > n {
        if let Some(m) = mentions.iter_mut().filter(|m| m.len > min_len(m)).max_by_key(|m| m.len) {
            m.len -= 1;
        } else if let Some(pos) = mentions.iter().rposition(|m| m.inner.is_none()) {
            mentions.remove(pos);
        } else {
            mentions.pop();
        }
    }
    for m in &mut mentions {
        if let Some((u, _, _)) = m.inner {
            let inner_len = rng.random_range(1..=m.len - 2);
            let offset = rng.random_range(1..=m.len - 1 - inner_len);
            m.inner = Some((u, inner_len, offset));
        }
    }

    let mut gaps = vec![0usize; mentions.len() + 1];
    for g in gaps.iter_mut().take(mentions.len()).skip(1) {
        *g = 1;
    }
    for _ in 0..n - needed(&mentions) {
        let k = rng.random_range(0..gaps.len());
        gaps[k] += 1;
    }

    let fillers = WORDS_PER_TYPE * cfg.num_types..cfg.vocab_size;
    let mut tokens: Vec<usize> = (0..n).map(|_| rng.random_range(fillers.clone())).collect();
    let mut entities = Vec::new();
    let mut pos = 0;
    for (m, gap) in mentions.iter().zip(&gaps) {
        pos += gap;
        paint(&mut tokens, rng, pos, m.len, m.ty);
        entities.push(Entity::new(pos, pos + m.len - 1, SynthConfig::type_name(m.ty)));
        if let Some((u, len, offset)) = m.inner {
            paint(&mut tokens, rng, pos + offset, len, u);
            entities.push(Entity::new(pos + offset, pos + offset + len - 1, SynthConfig::type_name(u)));
        }
        pos += m.len;
    }
    entities.sort();
    Sentence::new(tokens.into_iter().map(|w| format!("w{w}")).collect(), entities)
}

/// Generates `cfg.sentences` sentences. Each mention gets an inner mention
/// with probability `p / (2 - p)`, which makes the expected share of
/// overlapping mentions `p`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Sentence>> {
    cfg.validate()?;
    let p = cfg.nesting_rate;
    let nest_prob = p / (2.0 - p);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.sentences)
        .map(|i| {
            let mut s = sentence(cfg, &mut rng, nest_prob);
            s.doc_id = Some(format!("doc{}", i / 10));
            s
        })
        .collect())
}

/// Generates `train + dev + test` sentences in one stream and cuts them in
/// that order; `cfg.sentences` is ignored.
pub fn synth_corpus(cfg: &SynthConfig, sizes: [usize; 3]) -> Result<Corpus> {
    let total = SynthConfig {
        sentences: sizes.iter().sum(),
        ..cfg.clone()
    };
    let mut all = synth_generate(&total)?;
    let test = all.split_off(sizes[0] + sizes[1]);
    let dev = all.split_off(sizes[0]);
    Ok(Corpus::from_splits(all, dev, test))
}
