//! Top-k accuracy, macro precision/recall, and decoding of score tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{LabelSpace, Labels, ScoreTriple, Task};
use crate::scores::ScoreTable;
use crate::tensor::argmax;

/// True when `class` ranks among the `k` highest logits, ties going to the
/// lower index.
pub fn in_top_k(logits: &[f64], class: usize, k: usize) -> bool {
    let s = logits[class];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < class))
        .count();
    ahead < k
}

fn labeled<'a>(
    table: &'a ScoreTable,
    labels: &'a BTreeMap<String, Labels>,
    task: Task,
) -> Result<Vec<(&'a [f64], usize)>> {
    if table.is_empty() {
        return Err(Error::Invalid("empty score table".into()));
    }
    table
        .rows
        .iter()
        .map(|(id, t)| {
            let l = labels
                .get(id)
                .ok_or_else(|| Error::Invalid(format!("no label for segment {id:?}")))?;
            let logits = t.task(task);
            let y = task.label(l);
            if y >= logits.len() {
                return Err(Error::OutOfRange {
                    what: task.name(),
                    index: y,
                    size: logits.len(),
                });
            }
            Ok((logits, y))
        })
        .collect()
}

/// Fraction of segments whose true class is among the top `k` logits.
pub fn topk_accuracy(table: &ScoreTable, labels: &BTreeMap<String, Labels>, task: Task, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let rows = labeled(table, labels, task)?;
    let hits = rows.iter().filter(|(l, y)| in_top_k(l, *y, k)).count();
    Ok(hits as f64 / rows.len() as f64)
}

/// Macro-averaged precision and recall of top-1 predictions, as fractions.
/// Classes with neither ground truth nor predictions are left out; a class
/// with ground truth but no predictions has precision 0, and one with
/// predictions but no ground truth has recall 0.
pub fn macro_precision_recall(table: &ScoreTable, labels: &BTreeMap<String, Labels>, task: Task) -> Result<(f64, f64)> {
    let rows = labeled(table, labels, task)?;
    let classes = rows[0].0.len();
    let (mut tp, mut pred, mut truth) = (vec![0usize; classes], vec![0usize; classes], vec![0usize; classes]);
    for (l, y) in &rows {
        let p = argmax(l);
        pred[p] += 1;
        truth[*y] += 1;
        if p == *y {
            tp[p] += 1;
        }
    }
    let (mut ps, mut rs, mut n) = (0.0, 0.0, 0usize);
    for c in 0..classes {
        if pred[c] == 0 && truth[c] == 0 {
            continue;
        }
        n += 1;
        if pred[c] > 0 {
            ps += tp[c] as f64 / pred[c] as f64;
        }
        if truth[c] > 0 {
            rs += tp[c] as f64 / truth[c] as f64;
        }
    }
    Ok((ps / n as f64, rs / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Direct,
    Pair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
    /// Pair mode only: the argmax pair was not an observed action.
    pub fallback: bool,
}

pub fn decode_one(t: &ScoreTriple, space: &LabelSpace, mode: DecodeMode) -> Result<Decoded> {
    t.check(space)?;
    match mode {
        DecodeMode::Direct => {
            let action = argmax(&t.action);
            let (verb, noun) = space.derive_pair(action)?;
            Ok(Decoded {
                verb,
                noun,
                action,
                fallback: false,
            })
        }
        DecodeMode::Pair => {
            let (verb, noun) = (argmax(&t.verb), argmax(&t.noun));
            if let Some(action) = space.action_of(verb, noun) {
                return Ok(Decoded {
                    verb,
                    noun,
                    action,
                    fallback: false,
                });
            }
            // best action sharing the verb; with no such action, best overall
            let same_verb = space
                .actions()
                .iter()
                .enumerate()
                .filter(|(_, p)| p.0 == verb)
                .map(|(a, _)| a)
                .fold(None, |best: Option<usize>, a| match best {
                    Some(b) if t.action[b] >= t.action[a] => Some(b),
                    _ => Some(a),
                });
            let action = same_verb.unwrap_or_else(|| argmax(&t.action));
            Ok(Decoded {
                verb,
                noun,
                action,
                fallback: true,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub mode: DecodeMode,
    pub rows: BTreeMap<String, Decoded>,
}

impl Decoding {
    pub fn fallback_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.values().filter(|d| d.fallback).count() as f64 / self.rows.len() as f64
    }
}

pub fn decode(table: &ScoreTable, space: &LabelSpace, mode: DecodeMode) -> Result<Decoding> {
    table.check(space)?;
    let rows = table
        .rows
        .iter()
        .map(|(id, t)| Ok((id.clone(), decode_one(t, space, mode)?)))
        .collect::<Result<_>>()?;
    Ok(Decoding { mode, rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub top1: f64,
    pub top5: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Percentages per task; precision and recall follow the macro convention
/// of [`macro_precision_recall`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub verb: TaskMetrics,
    pub noun: TaskMetrics,
    pub action: TaskMetrics,
}

impl MetricsReport {
    pub fn compute(table: &ScoreTable, labels: &BTreeMap<String, Labels>) -> Result<Self> {
        let one = |task| -> Result<TaskMetrics> {
            let (p, r) = macro_precision_recall(table, labels, task)?;
            Ok(TaskMetrics {
                top1: 100.0 * topk_accuracy(table, labels, task, 1)?,
                top5: 100.0 * topk_accuracy(table, labels, task, 5)?,
                precision: 100.0 * p,
                recall: 100.0 * r,
            })
        };
        Ok(MetricsReport {
            verb: one(Task::Verb)?,
            noun: one(Task::Noun)?,
            action: one(Task::Action)?,
        })
    }

    pub fn task(&self, task: Task) -> &TaskMetrics {
        match task {
            Task::Verb => &self.verb,
            Task::Noun => &self.noun,
            Task::Action => &self.action,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,top1,top5,precision,recall\n");
        for task in Task::ALL {
            let m = self.task(task);
            let _ = writeln!(out, "{},{},{},{},{}", task.name(), m.top1, m.top5, m.precision, m.recall);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::Split;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space() -> LabelSpace {
        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect();
        LabelSpace::from_pairs(names("v", 3), names("n", 4), &[(0, 0), (1, 1), (2, 2), (0, 3), (1, 0)]).unwrap()
    }

    fn table(space: &LabelSpace, rows: Vec<ScoreTriple>) -> ScoreTable {
        ScoreTable::from_rows(space, Split::S1, rows.into_iter().enumerate().map(|(i, t)| (format!("s{i:03}"), t))).unwrap()
    }

    fn labels(space: &LabelSpace, actions: &[usize]) -> BTreeMap<String, Labels> {
        actions
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let (v, n) = space.derive_pair(a).unwrap();
                (format!("s{i:03}"), space.labels(v, n).unwrap())
            })
            .collect()
    }

    fn one_hot(n: usize, k: usize) -> Vec<f64> {
        (0..n).map(|i| f64::from(u8::from(i == k))).collect()
    }

    #[test]
    fn top_k_ties_go_to_lower_index() {
        let l = [1.0, 1.0, 1.0];
        assert!(in_top_k(&l, 0, 1));
        assert!(!in_top_k(&l, 1, 1));
        assert!(in_top_k(&l, 1, 2));
        assert!(!in_top_k(&l, 2, 2));
    }

    #[test]
    fn perfect_predictions() {
        let s = space();
        let acts = [0, 1, 2, 3, 4, 0];
        let rows = acts
            .iter()
            .map(|&a| {
                let (v, n) = s.derive_pair(a).unwrap();
                ScoreTriple {
                    verb: one_hot(3, v),
                    noun: one_hot(4, n),
                    action: one_hot(5, a),
                }
            })
            .collect();
        let t = table(&s, rows);
        let l = labels(&s, &acts);
        for task in Task::ALL {
            for k in 1..=3 {
                assert_eq!(topk_accuracy(&t, &l, task, k).unwrap(), 1.0);
            }
            assert_eq!(macro_precision_recall(&t, &l, task).unwrap(), (1.0, 1.0));
        }
        assert!(topk_accuracy(&t, &l, Task::Verb, 0).is_err());
        let r = MetricsReport::compute(&t, &l).unwrap();
        assert_eq!(r.action.top1, 100.0);
        assert!(r.to_csv().starts_with("task,top1,top5,precision,recall\nverb,100,100,100,100\n"));
    }

    #[test]
    fn all_class_zero_balanced_truth() {
        let s = LabelSpace::from_pairs(vec!["a".into(), "b".into()], vec!["x".into()], &[(0, 0), (1, 0)]).unwrap();
        let rows = (0..4)
            .map(|_| ScoreTriple {
                verb: vec![1.0, 0.0],
                noun: vec![0.0],
                action: vec![1.0, 0.0],
            })
            .collect();
        let t = table(&s, rows);
        let l = labels(&s, &[0, 1, 0, 1]);
        let (p, r) = macro_precision_recall(&t, &l, Task::Verb).unwrap();
        assert_eq!(r, 0.5);
        assert_eq!(p, 0.25);
        assert_eq!(topk_accuracy(&t, &l, Task::Verb, 2).unwrap(), 1.0);
    }

    #[test]
    fn missing_label_is_an_error() {
        let s = space();
        let t = table(&s, vec![ScoreTriple {
            verb: vec![0.0; 3],
            noun: vec![0.0; 4],
            action: vec![0.0; 5],
        }]);
        assert!(topk_accuracy(&t, &BTreeMap::new(), Task::Noun, 1).is_err());
        assert!(macro_precision_recall(&t, &BTreeMap::new(), Task::Noun).is_err());
    }

    #[test]
    fn decode_modes() {
        let s = space();
        // verb 2, noun 0 is unobserved; the only verb-2 action is 2
        let t = ScoreTriple {
            verb: vec![0.0, 0.0, 3.0],
            noun: vec![2.0, 0.0, 0.0, 0.0],
            action: vec![5.0, 0.0, -1.0, 0.0, 0.0],
        };
        let d = decode_one(&t, &s, DecodeMode::Pair).unwrap();
        assert_eq!((d.verb, d.noun, d.action, d.fallback), (2, 0, 2, true));
        let d = decode_one(&t, &s, DecodeMode::Direct).unwrap();
        assert_eq!((d.verb, d.noun, d.action, d.fallback), (0, 0, 0, false));
        // agreement when the argmax pair is the argmax action's pair
        let t = ScoreTriple {
            verb: vec![0.0, 3.0, 0.0],
            noun: vec![2.0, 0.0, 0.0, 0.0],
            action: vec![0.0, 0.0, 0.0, 0.0, 4.0],
        };
        assert_eq!(decode_one(&t, &s, DecodeMode::Pair).unwrap().action, 4);
        assert_eq!(decode_one(&t, &s, DecodeMode::Direct).unwrap().action, 4);
    }

    #[test]
    fn fallback_rate_matches_scan() {
        let s = space();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let rows: Vec<_> = (0..200)
            .map(|_| ScoreTriple {
                verb: v(3),
                noun: v(4),
                action: v(5),
            })
            .collect();
        let t = table(&s, rows.clone());
        let d = decode(&t, &s, DecodeMode::Pair).unwrap();
        let scan = rows
            .iter()
            .filter(|r| !s.actions().contains(&(argmax(&r.verb), argmax(&r.noun))))
            .count();
        assert_eq!(d.fallback_rate(), scan as f64 / 200.0);
        assert_eq!(decode(&t, &s, DecodeMode::Direct).unwrap().fallback_rate(), 0.0);
    }
}
