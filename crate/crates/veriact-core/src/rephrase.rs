//! Instruction rephrasing: a deterministic grammar paraphraser, k-means
//! curation of rephrase subsets, boot-time embedding caches, and the
//! numbered-list protocol for an optional remote provider.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::rng::{self};
use crate::world::Instruction;

#[derive(Debug, Error, PartialEq, Clone)]
pub enum RephraseError {
    #[error("parse error: no template matches; furthest failure at slot {slot}")]
    Parse { slot: String },
    #[error("capacity error: requested {requested} variants but the grammar has {max} distinct surfaces")]
    Capacity { requested: usize, max: usize },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("provider error: got {got} rephrases, wanted {want}")]
    ProviderCount { got: usize, want: usize },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

pub type Result<T> = core::result::Result<T, RephraseError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RephraseSource {
    Grammar,
    Remote,
}

/// K semantically equivalent surface forms, variants[0] = the original.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RephraseSet {
    pub original: Instruction,
    pub variants: Vec<Instruction>,
    pub source: RephraseSource,
    /// Pooled unit-norm text embedding per variant, filled by boot-time caching.
    pub cached_text_embeddings: Option<Vec<Vec<f64>>>,
    /// Per-variant frozen token feature matrices, reused so scoring never
    /// re-invokes the text encoder.
    pub cached_token_features: Option<Vec<Tensor>>,
}

impl RephraseSet {
    pub fn k(&self) -> usize {
        self.variants.len()
    }
}

// ---------------------------------------------------------------------------
// grammar paraphraser
// ---------------------------------------------------------------------------

/// A token in a sentence frame.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Frame {
    Lit(&'static str),
    Verb,
    Color,
    Noun,
    DestColor,
    DestNoun,
}

use Frame::*;

const TEMPLATES: &[&[Frame]] = &[
    &[Verb, Lit("the"), Color, Noun, Lit("on"), Lit("the"), DestColor, DestNoun],
    &[Verb, Lit("the"), Color, Noun, Lit("onto"), Lit("the"), DestColor, DestNoun],
    &[
        Lit("pick"), Lit("up"), Lit("the"), Color, Noun, Lit("and"), Verb, Lit("it"),
        Lit("on"), Lit("the"), DestColor, DestNoun,
    ],
    &[
        Verb, Lit("the"), Color, Noun, Lit("over"), Lit("to"), Lit("the"), DestColor,
        DestNoun,
    ],
    &[
        Lit("i"), Lit("want"), Lit("the"), Color, Noun, Lit("on"), Lit("the"), DestColor,
        DestNoun,
    ],
    &[
        Lit("grab"), Lit("the"), Color, Noun, Lit("and"), Verb, Lit("it"), Lit("onto"),
        Lit("the"), DestColor, DestNoun,
    ],
];

/// Synonym tables per slot. Every synonym maps back to the same canonical
/// word, so substitution never changes the underlying intent.
#[derive(Debug, Clone)]
pub struct ParaphraseGrammar {
    verbs: Vec<(&'static str, Vec<&'static str>)>,
    colors: Vec<(&'static str, Vec<&'static str>)>,
    nouns: Vec<(&'static str, Vec<&'static str>)>,
    containers: Vec<(&'static str, Vec<&'static str>)>,
}

impl Default for ParaphraseGrammar {
    fn default() -> Self {
        Self {
            verbs: vec![
                ("put", vec!["put", "place", "move"]),
                ("stack", vec!["stack", "pile", "perch"]),
            ],
            colors: vec![
                ("red", vec!["red", "crimson", "scarlet"]),
                ("blue", vec!["blue", "azure", "navy"]),
                ("green", vec!["green", "emerald", "jade"]),
                ("yellow", vec!["yellow", "gold", "amber"]),
                ("purple", vec!["purple", "violet", "lavender"]),
                ("orange", vec!["orange", "tangerine", "apricot"]),
            ],
            nouns: vec![
                ("block", vec!["block", "cube", "brick"]),
                ("ball", vec!["ball", "sphere", "orb"]),
                ("ring", vec!["ring", "loop", "hoop"]),
                ("disk", vec!["disk", "disc", "puck"]),
            ],
            containers: vec![("tray", vec!["tray", "dish", "platter"])],
        }
    }
}

/// Parsed slot values, canonicalized.
#[derive(Debug, Clone, PartialEq)]
struct ParsedSlots {
    verb: usize,
    color: usize,
    noun: usize,
    dest_color: usize,
    dest_noun_is_container: bool,
    dest_noun: usize,
}

fn lookup(tables: &[(&'static str, Vec<&'static str>)], token: &str) -> Option<usize> {
    tables
        .iter()
        .position(|(_, syns)| syns.iter().any(|s| *s == token))
}

impl ParaphraseGrammar {
    fn parse(&self, tokens: &[String]) -> Result<ParsedSlots> {
        let mut best_fail: (usize, String) = (0, "template start".to_string());
        'templates: for frame in TEMPLATES {
            if frame.len() != tokens.len() {
                continue;
            }
            let mut slots = ParsedSlots {
                verb: 0,
                color: 0,
                noun: 0,
                dest_color: 0,
                dest_noun_is_container: true,
                dest_noun: 0,
            };
            for (i, f) in frame.iter().enumerate() {
                let tok = tokens[i].as_str();
                let ok = match f {
                    Lit(w) => *w == tok,
                    Verb => match lookup(&self.verbs, tok) {
                        Some(v) => {
                            slots.verb = v;
                            true
                        }
                        None => false,
                    },
                    Color => match lookup(&self.colors, tok) {
                        Some(c) => {
                            slots.color = c;
                            true
                        }
                        None => false,
                    },
                    Noun => match lookup(&self.nouns, tok) {
                        Some(n) => {
                            slots.noun = n;
                            true
                        }
                        None => false,
                    },
                    DestColor => match lookup(&self.colors, tok) {
                        Some(c) => {
                            slots.dest_color = c;
                            true
                        }
                        None => false,
                    },
                    DestNoun => {
                        if let Some(c) = lookup(&self.containers, tok) {
                            slots.dest_noun_is_container = true;
                            slots.dest_noun = c;
                            true
                        } else if let Some(n) = lookup(&self.nouns, tok) {
                            slots.dest_noun_is_container = false;
                            slots.dest_noun = n;
                            true
                        } else {
                            false
                        }
                    }
                };
                if !ok {
                    if i >= best_fail.0 {
                        best_fail = (i, format!("{f:?} (token {:?})", tokens[i]));
                    }
                    continue 'templates;
                }
            }
            return Ok(slots);
        }
        Err(RephraseError::Parse { slot: best_fail.1 })
    }

    fn render(&self, slots: &ParsedSlots, template: usize, choice: &[usize]) -> Vec<String> {
        // choice = [verb_syn, color_syn, noun_syn, dest_color_syn, dest_noun_syn]
        let mut out = Vec::new();
        for f in TEMPLATES[template] {
            let word: &str = match f {
                Lit(w) => w,
                Verb => self.verbs[slots.verb].1[choice[0]],
                Color => self.colors[slots.color].1[choice[1]],
                Noun => self.nouns[slots.noun].1[choice[2]],
                DestColor => self.colors[slots.dest_color].1[choice[3]],
                DestNoun => {
                    if slots.dest_noun_is_container {
                        self.containers[slots.dest_noun].1[choice[4]]
                    } else {
                        self.nouns[slots.dest_noun].1[choice[4]]
                    }
                }
            };
            out.push(word.to_string());
        }
        out
    }

    fn surface_space(&self, slots: &ParsedSlots) -> Vec<(usize, [usize; 5])> {
        let nv = self.verbs[slots.verb].1.len();
        let nc = self.colors[slots.color].1.len();
        let nn = self.nouns[slots.noun].1.len();
        let ndc = self.colors[slots.dest_color].1.len();
        let ndn = if slots.dest_noun_is_container {
            self.containers[slots.dest_noun].1.len()
        } else {
            self.nouns[slots.dest_noun].1.len()
        };
        let mut all = Vec::new();
        for t in 0..TEMPLATES.len() {
            for v in 0..nv {
                for c in 0..nc {
                    for n in 0..nn {
                        for dc in 0..ndc {
                            for dn in 0..ndn {
                                all.push((t, [v, c, n, dc, dn]));
                            }
                        }
                    }
                }
            }
        }
        all
    }
}

/// Expand an instruction into K rephrases by slot-synonym substitution and
/// template resampling. Deterministic in (instruction, k, seed);
/// variants[0] is the input; all variants share its intent id.
pub fn grammar_rephrase(
    grammar: &ParaphraseGrammar,
    instruction: &Instruction,
    k: usize,
    seed: u64,
) -> Result<RephraseSet> {
    if k < 1 {
        return Err(RephraseError::InvalidArg("K must be >= 1".to_string()));
    }
    let slots = grammar.parse(&instruction.tokens)?;
    let mut space = grammar.surface_space(&slots);
    let mut rng = rng::substream(seed, &[0x726570, instruction.surface_id]);
    for i in 0..space.len() {
        let j = i + rng::below(&mut rng, space.len() - i);
        space.swap(i, j);
    }
    let mut variants = vec![instruction.clone()];
    let mut seen: Vec<u64> = vec![instruction.surface_id];
    for (t, choice) in &space {
        if variants.len() == k {
            break;
        }
        let tokens = grammar.render(&slots, *t, choice);
        let cand = Instruction::from_tokens(tokens, instruction.intent_id);
        if !seen.contains(&cand.surface_id) {
            seen.push(cand.surface_id);
            variants.push(cand);
        }
    }
    if variants.len() < k {
        return Err(RephraseError::Capacity {
            requested: k,
            max: seen.len(),
        });
    }
    Ok(RephraseSet {
        original: instruction.clone(),
        variants,
        source: RephraseSource::Grammar,
        cached_text_embeddings: None,
        cached_token_features: None,
    })
}

// ---------------------------------------------------------------------------
// remote provider protocol
// ---------------------------------------------------------------------------

/// Transport abstraction for the remote rephrase path; the HTTP client lives
/// in the companion crate, test stubs implement this directly.
pub trait RephraseProvider {
    fn complete(&self, system_prompt: &str, user_prompt: &str) -> Result<String>;
}

/// Fill the user prompt template: {instruction} and {batch_number}.
pub fn fill_user_prompt(template: &str, instruction_text: &str, batch_number: usize) -> String {
    template
        .replace("{instruction}", instruction_text)
        .replace("{batch_number}", &format!("{batch_number}"))
}

/// Parse the trailing numbered list ("1. <phrasing>") from a provider
/// response, expecting at least `k` entries.
pub fn parse_numbered_list(content: &str, k: usize) -> Result<Vec<String>> {
    let mut items: Vec<(usize, String)> = Vec::new();
    for line in content.lines() {
        let line = line.trim();
        if let Some(dot) = line.find('.') {
            if let Ok(n) = line[..dot].parse::<usize>() {
                let text = line[dot + 1..].trim();
                if !text.is_empty() {
                    // restart on a fresh "1." so earlier numbered prose is ignored
                    if n == 1 {
                        items.clear();
                    }
                    items.push((n, text.to_string()));
                }
            }
        }
    }
    if items.len() < k {
        return Err(RephraseError::ProviderCount {
            got: items.len(),
            want: k,
        });
    }
    Ok(items.into_iter().take(k).map(|(_, t)| t).collect())
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '\'')
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Generate K rephrases through a remote provider. The response must contain
/// the numbered list format; variants[0] is forced to the original.
pub fn remote_rephrase<P: RephraseProvider>(
    instruction: &Instruction,
    scene_description: &str,
    k: usize,
    provider: &P,
    system_prompt: &str,
    user_prompt_template: &str,
) -> Result<RephraseSet> {
    if k < 1 || k > 32 {
        return Err(RephraseError::InvalidArg(format!("K must be in 1..=32, got {k}")));
    }
    let user = fill_user_prompt(user_prompt_template, &instruction.text(), k)
        .replace("{scene_description}", scene_description);
    let content = provider.complete(system_prompt, &user)?;
    let lines = parse_numbered_list(&content, k.saturating_sub(1).max(1))?;
    let mut variants = vec![instruction.clone()];
    for line in lines {
        if variants.len() == k {
            break;
        }
        let cand = Instruction::from_tokens(tokenize(&line), instruction.intent_id);
        if variants.iter().all(|v| v.surface_id != cand.surface_id) {
            variants.push(cand);
        }
    }
    Ok(RephraseSet {
        original: instruction.clone(),
        variants,
        source: RephraseSource::Remote,
        cached_text_embeddings: None,
        cached_token_features: None,
    })
}

// ---------------------------------------------------------------------------
// boot-time caching
// ---------------------------------------------------------------------------

/// Precompute per-variant text features once, so per-step scoring never calls
/// the text encoder again. `text_encoder` returns the frozen T×F token
/// feature matrix for an instruction.
pub fn boot_time_cache<F>(mut set: RephraseSet, mut text_encoder: F) -> RephraseSet
where
    F: FnMut(&Instruction) -> Tensor,
{
    let mut features = Vec::with_capacity(set.variants.len());
    let mut pooled = Vec::with_capacity(set.variants.len());
    for v in &set.variants {
        let feat = text_encoder(v);
        let (t, f) = (feat.shape()[0], feat.shape()[1]);
        let mut mean = vec![0.0; f];
        for row in 0..t {
            for col in 0..f {
                mean[col] += feat.data()[row * f + col] / t as f64;
            }
        }
        let norm = libm::sqrt(mean.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
        for x in mean.iter_mut() {
            *x /= norm;
        }
        features.push(feat);
        pooled.push(mean);
    }
    set.cached_token_features = Some(features);
    set.cached_text_embeddings = Some(pooled);
    set
}

// ---------------------------------------------------------------------------
// k-means curation
// ---------------------------------------------------------------------------

/// Curate a rephrase subset: k-means (k-means++ seeding, 100-iteration cap)
/// over the embeddings, then the instruction nearest each centroid.
/// Deterministic given the seed; all ties break to the lowest index.
pub fn kmeans_curate(
    instructions: &[Instruction],
    embeddings: &[Vec<f64>],
    target_count: usize,
    seed: u64,
) -> Result<Vec<Instruction>> {
    if instructions.len() != embeddings.len() {
        return Err(RephraseError::InvalidArg(format!(
            "{} instructions vs {} embeddings",
            instructions.len(),
            embeddings.len()
        )));
    }
    if target_count == 0 || target_count > instructions.len() {
        return Err(RephraseError::InvalidArg(format!(
            "target_count {target_count} out of range 1..={}",
            instructions.len()
        )));
    }
    let n = embeddings.len();
    let dim = embeddings[0].len();
    let sqdist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding
    let mut rng = rng::substream(seed, &[0x6b6d65616e73]);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(target_count);
    centroids.push(embeddings[rng::below(&mut rng, n)].clone());
    while centroids.len() < target_count {
        let d2: Vec<f64> = embeddings
            .iter()
            .map(|e| {
                centroids
                    .iter()
                    .map(|c| sqdist(e, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 1e-18 {
            // all remaining points coincide with existing centroids
            rng::below(&mut rng, n)
        } else {
            let mut r = rng::uniform(&mut rng) * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        };
        centroids.push(embeddings[next].clone());
    }

    // Lloyd iterations
    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, e) in embeddings.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = sqdist(e, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        for (c, cent) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|i| assign[*i] == c).collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                cent[d] = members.iter().map(|i| embeddings[*i][d]).sum::<f64>()
                    / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }

    // nearest instruction per centroid, distinct indices, lowest index wins
    let mut used = vec![false; n];
    let mut out = Vec::with_capacity(target_count);
    for cent in &centroids {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for i in 0..n {
            if used[i] {
                continue;
            }
            let d = sqdist(&embeddings[i], cent);
            if d < best_d {
                best_d = d;
                best = Some(i);
            }
        }
        let i = best.expect("target_count <= n leaves a free point");
        used[i] = true;
        out.push(instructions[i].clone());
    }
    Ok(out)
}
