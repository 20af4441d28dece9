//! IBM Model 1 lexical translation table trained by EM, with
//! intersection-symmetrized best-link alignment.

use std::collections::HashMap;

use crate::corpus::AlignmentSet;
use crate::error::{Error, Result};

/// Probability assigned to pairs the table has never seen.
pub const FLOOR: f64 = 1e-9;
const NULL: usize = 0;

/// `t(target | source)`; source id 0 is the NULL word.
#[derive(Clone, Debug)]
pub struct Ibm1Table {
    src_ids: HashMap<String, usize>,
    tgt_ids: HashMap<String, usize>,
    /// `t[e][f]`
    t: Vec<HashMap<usize, f64>>,
}

impl Ibm1Table {
    pub fn prob(&self, tgt: &str, src: Option<&str>) -> f64 {
        let e = match src {
            None => Some(NULL),
            Some(s) => self.src_ids.get(s).copied(),
        };
        match (e, self.tgt_ids.get(tgt)) {
            (Some(e), Some(f)) => self.t[e].get(f).copied().unwrap_or(FLOOR).max(FLOOR),
            _ => FLOOR,
        }
    }

    /// `Σ_f t(f|e)` for a source word (`None` = NULL).
    pub fn mass(&self, src: Option<&str>) -> f64 {
        let e = match src {
            None => NULL,
            Some(s) => match self.src_ids.get(s) {
                Some(&e) => e,
                None => return 0.0,
            },
        };
        self.t[e].values().sum()
    }

    pub fn source_words(&self) -> impl Iterator<Item = &str> {
        self.src_ids.keys().map(String::as_str)
    }

    /// Links kept by both the per-target best source and the per-source best
    /// target; ties go to the lower index, and NULL wins block links.
    pub fn align<S: AsRef<str>, T: AsRef<str>>(&self, src: &[S], tgt: &[T]) -> AlignmentSet {
        let mut set = AlignmentSet::default();
        if src.is_empty() || tgt.is_empty() {
            return set;
        }
        let p = |j: usize, i: usize| self.prob(tgt[j].as_ref(), Some(src[i].as_ref()));
        let best_src: Vec<Option<usize>> = (0..tgt.len())
            .map(|j| {
                let null = self.prob(tgt[j].as_ref(), None);
                let mut best = (None, null);
                for i in 0..src.len() {
                    if p(j, i) > best.1 {
                        best = (Some(i), p(j, i));
                    }
                }
                best.0
            })
            .collect();
        for i in 0..src.len() {
            let mut bj = 0;
            for j in 1..tgt.len() {
                if p(j, i) > p(bj, i) {
                    bj = j;
                }
            }
            if best_src[bj] == Some(i) {
                set.0.insert((i, bj));
            }
        }
        set
    }
}

fn intern(map: &mut HashMap<String, usize>, w: &str) -> usize {
    let n = map.len();
    *map.entry(w.to_string()).or_insert(n)
}

/// EM from a uniform start. Returns the table and the corpus
/// log-likelihood measured at the start of each iteration, which EM never
/// decreases.
pub fn train_ibm1<S: AsRef<str>>(
    corpus: &[(Vec<S>, Vec<S>)],
    iterations: usize,
) -> Result<(Ibm1Table, Vec<f64>)> {
    if iterations == 0 {
        return Err(Error::contract("IBM-1 needs at least one iteration"));
    }
    if corpus.iter().all(|(s, t)| s.is_empty() || t.is_empty()) {
        return Err(Error::contract("IBM-1 needs a non-empty parallel corpus"));
    }
    let mut src_ids = HashMap::new();
    src_ids.insert(String::new(), NULL);
    let mut tgt_ids = HashMap::new();
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = corpus
        .iter()
        .filter(|(s, t)| !s.is_empty() && !t.is_empty())
        .map(|(s, t)| {
            let mut e = vec![NULL];
            e.extend(s.iter().map(|w| intern(&mut src_ids, w.as_ref())));
            let f = t.iter().map(|w| intern(&mut tgt_ids, w.as_ref())).collect();
            (e, f)
        })
        .collect();
    src_ids.remove("");
    let uniform = 1.0 / tgt_ids.len() as f64;
    let ne = pairs
        .iter()
        .flat_map(|(e, _)| e.iter())
        .max()
        .map_or(1, |m| m + 1);
    let mut t: Vec<HashMap<usize, f64>> = vec![HashMap::new(); ne];
    for (e, f) in &pairs {
        for &ei in e {
            for &fj in f {
                t[ei].insert(fj, uniform);
            }
        }
    }
    let mut history = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut counts: Vec<HashMap<usize, f64>> = vec![HashMap::new(); ne];
        let mut ll = 0.0;
        for (e, f) in &pairs {
            for &fj in f {
                let z: f64 = e.iter().map(|&ei| t[ei][&fj]).sum();
                ll += (z / e.len() as f64).ln();
                for &ei in e {
                    *counts[ei].entry(fj).or_default() += t[ei][&fj] / z;
                }
            }
        }
        history.push(ll);
        for (row, c) in t.iter_mut().zip(counts) {
            let total: f64 = c.values().sum();
            if total > 0.0 {
                for (fj, v) in row.iter_mut() {
                    *v = c.get(fj).copied().unwrap_or(0.0) / total;
                }
            }
        }
    }
    src_ids.shrink_to_fit();
    Ok((
        Ibm1Table {
            src_ids,
            tgt_ids,
            t,
        },
        history,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(s: &str, t: &str) -> (Vec<String>, Vec<String>) {
        (
            s.split_whitespace().map(String::from).collect(),
            t.split_whitespace().map(String::from).collect(),
        )
    }

    #[test]
    fn single_word_pairs_converge() {
        let corpus = vec![pair("a", "A"); 4];
        let (table, _) = train_ibm1(&corpus, 5).unwrap();
        assert!((table.prob("A", Some("a")) - 1.0).abs() < 1e-6);
    }

    /// The crossed pair alone is symmetric under EM; one single-word pair
    /// per type breaks the tie.
    fn crossing_corpus() -> Vec<(Vec<String>, Vec<String>)> {
        let mut c = vec![pair("a b", "B A"); 4];
        c.push(pair("a", "A"));
        c.push(pair("b", "B"));
        c
    }

    #[test]
    fn crossing_pair_converges() {
        let (table, ll) = train_ibm1(&crossing_corpus(), 10).unwrap();
        assert!(table.prob("A", Some("a")) > 0.9);
        assert!(table.prob("B", Some("b")) > 0.9);
        assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        let a = table.align(&["a", "b"], &["B", "A"]);
        assert_eq!(a.0.into_iter().collect::<Vec<_>>(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn rows_are_distributions() {
        let corpus = vec![pair("a b", "B A"), pair("a c", "A C"), pair("c", "C")];
        let (table, _) = train_ibm1(&corpus, 7).unwrap();
        for w in ["a", "b", "c"] {
            assert!((table.mass(Some(w)) - 1.0).abs() < 1e-6);
        }
        assert!((table.mass(None) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identity_alignment() {
        let corpus = vec![
            pair("x y z", "x y z"),
            pair("x z", "x z"),
            pair("y", "y"),
            pair("z y", "z y"),
        ];
        let (table, _) = train_ibm1(&corpus, 10).unwrap();
        let a = table.align(&["x", "y", "z"], &["x", "y", "z"]);
        assert_eq!(
            a.0.into_iter().collect::<Vec<_>>(),
            vec![(0, 0), (1, 1), (2, 2)]
        );
        assert!(table.align::<&str, &str>(&[], &["x"]).is_empty());
    }

    #[test]
    fn unknown_words_get_floor() {
        let (table, _) = train_ibm1(&[pair("a", "A")], 1).unwrap();
        assert_eq!(table.prob("Q", Some("a")), FLOOR);
        assert_eq!(table.prob("A", Some("zz")), FLOOR);
    }

    #[test]
    fn rejects_empty() {
        let empty: Vec<(Vec<String>, Vec<String>)> = vec![];
        assert!(train_ibm1(&empty, 3).is_err());
        assert!(train_ibm1(&[pair("a", "A")], 0).is_err());
    }
}
