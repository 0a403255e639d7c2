//! Verb/noun/action label space and the structured prediction head.
//!
//! The action vocabulary is the set of verb–noun pairs that actually occur in
//! the annotations. Action logits are mapped through two linear layers and
//! added to the verb and noun logits as an instance-specific bias.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{init_uniform, param_struct};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Labels {
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
}

/// One annotated segment: `(segment_id, verb_id, noun_id)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub segment_id: String,
    pub verb: usize,
    pub noun: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    verbs: Vec<String>,
    nouns: Vec<String>,
    actions: Vec<(usize, usize)>,
    pair_to_action: HashMap<(usize, usize), usize>,
}

#[derive(Serialize, Deserialize)]
struct LabelSpaceJson {
    verbs: Vec<String>,
    nouns: Vec<String>,
    actions: Vec<[usize; 2]>,
}

impl LabelSpace {
    /// Enumerates the distinct observed pairs in first-occurrence order.
    pub fn build(verbs: Vec<String>, nouns: Vec<String>, annotations: &[Annotation]) -> Result<Self> {
        let mut space = Self {
            verbs,
            nouns,
            actions: Vec::new(),
            pair_to_action: HashMap::new(),
        };
        for a in annotations {
            space.observe(a.verb, a.noun)?;
        }
        Ok(space)
    }

    fn observe(&mut self, verb: usize, noun: usize) -> Result<()> {
        if verb >= self.verbs.len() {
            return Err(Error::OutOfRange {
                what: "verb id",
                index: verb,
                size: self.verbs.len(),
            });
        }
        if noun >= self.nouns.len() {
            return Err(Error::OutOfRange {
                what: "noun id",
                index: noun,
                size: self.nouns.len(),
            });
        }
        if !self.pair_to_action.contains_key(&(verb, noun)) {
            self.pair_to_action.insert((verb, noun), self.actions.len());
            self.actions.push((verb, noun));
        }
        Ok(())
    }

    /// Builds from an explicit ordered pair list; duplicates are rejected.
    pub fn from_pairs(verbs: Vec<String>, nouns: Vec<String>, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut space = Self::build(verbs, nouns, &[])?;
        for (i, &(v, n)) in pairs.iter().enumerate() {
            if space.pair_to_action.contains_key(&(v, n)) {
                return Err(Error::schema(format!("actions[{i}]"), format!("duplicate pair ({v}, {n})")));
            }
            space.observe(v, n)?;
        }
        Ok(space)
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn num_nouns(&self) -> usize {
        self.nouns.len()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn nouns(&self) -> &[String] {
        &self.nouns
    }

    pub fn actions(&self) -> &[(usize, usize)] {
        &self.actions
    }

    pub fn action_of(&self, verb: usize, noun: usize) -> Option<usize> {
        self.pair_to_action.get(&(verb, noun)).copied()
    }

    pub fn derive_pair(&self, action: usize) -> Result<(usize, usize)> {
        self.actions.get(action).copied().ok_or(Error::OutOfRange {
            what: "action id",
            index: action,
            size: self.actions.len(),
        })
    }

    /// Full labels for an observed pair.
    pub fn labels(&self, verb: usize, noun: usize) -> Result<Labels> {
        let action = self
            .action_of(verb, noun)
            .ok_or_else(|| Error::Invalid(format!("pair ({verb}, {noun}) is not an observed action")))?;
        Ok(Labels { verb, noun, action })
    }

    pub fn to_json(&self) -> Result<String> {
        let j = LabelSpaceJson {
            verbs: self.verbs.clone(),
            nouns: self.nouns.clone(),
            actions: self.actions.iter().map(|&(v, n)| [v, n]).collect(),
        };
        Ok(serde_json::to_string(&j)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: LabelSpaceJson = serde_json::from_str(s)?;
        let pairs: Vec<(usize, usize)> = j.actions.iter().map(|a| (a[0], a[1])).collect();
        Self::from_pairs(j.verbs, j.nouns, &pairs)
    }

    /// Short content hash identifying the space in score files.
    pub fn hash_id(&self) -> String {
        let canonical = self.to_json().expect("label space serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Verb, noun and action logit vectors for one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTriple {
    pub verb: Vec<f64>,
    pub noun: Vec<f64>,
    pub action: Vec<f64>,
}

impl ScoreTriple {
    pub fn check(&self, space: &LabelSpace) -> Result<()> {
        let dims = [
            ("verb", self.verb.len(), space.num_verbs()),
            ("noun", self.noun.len(), space.num_nouns()),
            ("action", self.action.len(), space.num_actions()),
        ];
        for (task, got, want) in dims {
            if got != want {
                return Err(Error::shape("score_triple", format!("{task}: {got} logits, space has {want}")));
            }
        }
        if self.iter_all().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "score_triple" });
        }
        Ok(())
    }

    fn iter_all(&self) -> impl Iterator<Item = &f64> {
        self.verb.iter().chain(&self.noun).chain(&self.action)
    }

    pub fn task(&self, task: Task) -> &[f64] {
        match task {
            Task::Verb => &self.verb,
            Task::Noun => &self.noun,
            Task::Action => &self.action,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Verb,
    Noun,
    Action,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Verb, Task::Noun, Task::Action];

    pub fn name(self) -> &'static str {
        match self {
            Task::Verb => "verb",
            Task::Noun => "noun",
            Task::Action => "action",
        }
    }

    pub fn label(self, l: &Labels) -> usize {
        match self {
            Task::Verb => l.verb,
            Task::Noun => l.noun,
            Task::Action => l.action,
        }
    }
}

/// Tape-bound logits.
#[derive(Clone, Debug)]
pub struct ScoreVars<'t> {
    pub verb: Var<'t>,
    pub noun: Var<'t>,
    pub action: Var<'t>,
}

impl<'t> ScoreVars<'t> {
    pub fn to_triple(&self) -> ScoreTriple {
        ScoreTriple {
            verb: self.verb.value().data().to_vec(),
            noun: self.noun.value().data().to_vec(),
            action: self.action.value().data().to_vec(),
        }
    }
}

param_struct! {
    /// Weights of the structured head for feature size `F`.
    pub struct StructuredHeadParams {
        /// `V × F`
        w_verb,
        b_verb,
        /// `N × F`
        w_noun,
        b_noun,
        /// `A × F`
        w_action,
        b_action,
        /// `V × A`, maps action logits onto verb logits.
        bias_verb,
        /// `N × A`
        bias_noun,
    }
}

impl StructuredHeadParams {
    /// Random classifiers; the two bias maps start at zero.
    pub fn init(seed: u64, prefix: &str, features: usize, space: &LabelSpace) -> Self {
        let (v, n, a) = (space.num_verbs(), space.num_nouns(), space.num_actions());
        let w = |name: &str, rows: usize| init_uniform(seed, &format!("{prefix}.{name}"), &[rows, features], features);
        let b = |name: &str, rows: usize| init_uniform(seed, &format!("{prefix}.{name}"), &[rows], features);
        Self {
            w_verb: w("w_verb", v),
            b_verb: b("b_verb", v),
            w_noun: w("w_noun", n),
            b_noun: b("b_noun", n),
            w_action: w("w_action", a),
            b_action: b("b_action", a),
            bias_verb: Tensor::zeros(&[v, a]),
            bias_noun: Tensor::zeros(&[n, a]),
        }
    }

    pub fn features(&self) -> usize {
        self.w_verb.shape()[1]
    }
}

fn rows_linear<'t>(x: &Var<'t>, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let k = w.shape()[0];
    x.matmul(&w.transpose()?)?.add(&b.reshape(&[1, k])?)
}

/// Structured head over a batch of rows `R × F`; each output is `R × K`.
pub fn structured_rows<'t>(x: &Var<'t>, p: &StructuredHeadParams<Var<'t>>) -> Result<ScoreVars<'t>> {
    let f = p.w_verb.shape()[1];
    if x.shape().len() != 2 || x.shape()[1] != f {
        return Err(Error::shape("structured_forward", format!("features {:?}, head expects {f}", x.shape())));
    }
    let action = rows_linear(x, &p.w_action, &p.b_action)?;
    let verb = rows_linear(x, &p.w_verb, &p.b_verb)?.add(&action.matmul(&p.bias_verb.transpose()?)?)?;
    let noun = rows_linear(x, &p.w_noun, &p.b_noun)?.add(&action.matmul(&p.bias_noun.transpose()?)?)?;
    Ok(ScoreVars { verb, noun, action })
}

/// `a = W_act f + b_act`; `verb = W_verb f + b_verb + B_v a`; likewise for nouns.
pub fn structured_forward<'t>(feature: &Var<'t>, p: &StructuredHeadParams<Var<'t>>) -> Result<ScoreVars<'t>> {
    let f = feature.shape()[0];
    if feature.shape().len() != 1 {
        return Err(Error::shape("structured_forward", format!("expected a vector, got {:?}", feature.shape())));
    }
    let rows = structured_rows(&feature.reshape(&[1, f])?, p)?;
    Ok(ScoreVars {
        verb: rows.verb.reshape(&[p.w_verb.shape()[0]])?,
        noun: rows.noun.reshape(&[p.w_noun.shape()[0]])?,
        action: rows.action.reshape(&[p.w_action.shape()[0]])?,
    })
}

/// Mean over rows of each task's `R × K` logits.
pub fn consensus_rows<'t>(rows: &ScoreVars<'t>) -> Result<ScoreVars<'t>> {
    Ok(ScoreVars {
        verb: rows.verb.mean_rows()?,
        noun: rows.noun.mean_rows()?,
        action: rows.action.mean_rows()?,
    })
}

/// Sum of the verb, noun and action cross-entropies, equally weighted.
pub fn multi_task_loss<'t>(scores: &ScoreVars<'t>, labels: &Labels) -> Result<Var<'t>> {
    let v = scores.verb.cross_entropy(labels.verb)?;
    let n = scores.noun.cross_entropy(labels.noun)?;
    let a = scores.action.cross_entropy(labels.action)?;
    v.add(&n)?.add(&a)
}

/// Verb cross-entropy alone.
pub fn verb_loss<'t>(scores: &ScoreVars<'t>, labels: &Labels) -> Result<Var<'t>> {
    scores.verb.cross_entropy(labels.verb)
}

/// Arithmetic mean of two triples.
pub fn fuse_scores(a: &ScoreTriple, b: &ScoreTriple) -> Result<ScoreTriple> {
    let mean = |x: &[f64], y: &[f64], task: &str| {
        if x.len() != y.len() {
            return Err(Error::shape("fuse_scores", format!("{task}: {} vs {}", x.len(), y.len())));
        }
        Ok(x.iter().zip(y).map(|(p, q)| (p + q) * 0.5).collect())
    };
    Ok(ScoreTriple {
        verb: mean(&a.verb, &b.verb, "verb")?,
        noun: mean(&a.noun, &b.noun, "noun")?,
        action: mean(&a.action, &b.action, "action")?,
    })
}

/// Tape version of [`fuse_scores`].
pub fn fuse_score_vars<'t>(a: &ScoreVars<'t>, b: &ScoreVars<'t>) -> Result<ScoreVars<'t>> {
    Ok(ScoreVars {
        verb: a.verb.add(&b.verb)?.scale(0.5)?,
        noun: a.noun.add(&b.noun)?.scale(0.5)?,
        action: a.action.add(&b.action)?.scale(0.5)?,
    })
}

/// `(verb, noun)` of the top-scoring action.
pub fn direct_pair(scores: &ScoreTriple, space: &LabelSpace) -> Result<(usize, usize)> {
    space.derive_pair(argmax(&scores.action))
}
