use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::tokenizer::{TokenId, Tokenizer};
use super::DecodeError;
use crate::ontology::Ontology;

/// Which tokens receive the `-gamma` penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasScope {
    /// Every token outside the bias set.
    #[default]
    AllVocab,
    /// Only tokens of ontology labels that were not retrieved.
    OntologyLabelsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSpec {
    pub beta: f64,
    pub gamma: f64,
    pub scope: BiasScope,
}

impl Default for BiasSpec {
    fn default() -> Self {
        BiasSpec { beta: 0.3, gamma: 0.2, scope: BiasScope::AllVocab }
    }
}

impl BiasSpec {
    pub fn new(beta: f64, gamma: f64) -> Self {
        BiasSpec { beta, gamma, scope: BiasScope::AllVocab }
    }

    pub fn neutral() -> Self {
        BiasSpec::new(0.0, 0.0)
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.beta.is_finite() && self.beta >= 0.0 && self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(DecodeError::InvalidBias(format!(
                "beta and gamma must be finite and non-negative (beta={}, gamma={})",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

/// Vocabulary-indexed logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DecodeError> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(DecodeError::NonFiniteLogits);
        }
        Ok(LogitVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: TokenId) -> Option<f64> {
        self.0.get(id as usize).copied()
    }
}

/// Union of the token ids of every label in `subgraph`.
pub fn bias_tokens<S: AsRef<str>>(
    o: &Ontology,
    subgraph: &[S],
    tokenizer: &dyn Tokenizer,
) -> Result<BTreeSet<TokenId>, DecodeError> {
    let mut out = BTreeSet::new();
    for id in subgraph {
        let node = o.node(id.as_ref())?;
        out.extend(tokenizer.label_tokens(&node.label)?);
    }
    Ok(out)
}

/// Boosted tokens plus the tokens that get penalized.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasPlan {
    pub boosted: BTreeSet<TokenId>,
    /// `None` penalizes everything outside `boosted`.
    pub penalized: Option<BTreeSet<TokenId>>,
}

impl BiasPlan {
    pub fn new<S: AsRef<str>>(
        o: &Ontology,
        retrieved: &[S],
        tokenizer: &dyn Tokenizer,
        scope: BiasScope,
    ) -> Result<Self, DecodeError> {
        let boosted = bias_tokens(o, retrieved, tokenizer)?;
        let penalized = match scope {
            BiasScope::AllVocab => None,
            BiasScope::OntologyLabelsOnly => {
                let mut others = BTreeSet::new();
                for n in o.intent_nodes() {
                    if !retrieved.iter().any(|r| r.as_ref() == n.id) {
                        others.extend(tokenizer.label_tokens(&n.label)?);
                    }
                }
                Some(&others - &boosted)
            }
        };
        Ok(BiasPlan { boosted, penalized })
    }

    pub fn all_vocab(boosted: BTreeSet<TokenId>) -> Self {
        BiasPlan { boosted, penalized: None }
    }
}

/// Returns `logit(w) + beta` for boosted tokens and `logit(w) - gamma` for
/// penalized ones. The input is left untouched.
pub fn apply_bias(logits: &LogitVector, plan: &BiasPlan, spec: &BiasSpec) -> Result<LogitVector, DecodeError> {
    spec.validate()?;
    let n = logits.len();
    let check = |set: &BTreeSet<TokenId>| match set.last() {
        Some(&id) if id as usize >= n => Err(DecodeError::UnknownToken(id)),
        _ => Ok(()),
    };
    check(&plan.boosted)?;
    if let Some(p) = &plan.penalized {
        check(p)?;
    }
    let mut out = logits.0.clone();
    match &plan.penalized {
        None => {
            for (w, x) in out.iter_mut().enumerate() {
                if plan.boosted.contains(&(w as TokenId)) {
                    *x += spec.beta;
                } else {
                    *x -= spec.gamma;
                }
            }
        }
        Some(penalized) => {
            for &w in &plan.boosted {
                out[w as usize] += spec.beta;
            }
            for &w in penalized {
                out[w as usize] -= spec.gamma;
            }
        }
    }
    LogitVector::new(out)
}

/// Max-subtracted softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Probability mass that the full-vocabulary softmax puts on `tokens`.
pub fn softmax_mass(logits: &LogitVector, tokens: &BTreeSet<TokenId>) -> f64 {
    let probs = softmax(logits.values());
    tokens.iter().filter_map(|&w| probs.get(w as usize)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::tokenizer::Vocabulary;

    fn set(ids: &[TokenId]) -> BTreeSet<TokenId> {
        ids.iter().copied().collect()
    }

    #[test]
    fn zero_bias_is_identity() {
        let l = LogitVector::new(vec![0.1, -2.0, 3.5]).unwrap();
        let out = apply_bias(&l, &BiasPlan::all_vocab(set(&[1])), &BiasSpec::neutral()).unwrap();
        assert_eq!(out, l);
    }

    #[test]
    fn default_setting_adjustments() {
        let l = LogitVector::new(vec![1.0, 1.0]).unwrap();
        let out = apply_bias(&l, &BiasPlan::all_vocab(set(&[0])), &BiasSpec::new(0.3, 0.2)).unwrap();
        assert!((out.values()[0] - 1.3).abs() < 1e-12);
        assert!((out.values()[1] - 0.8).abs() < 1e-12);
        assert_eq!(l.values(), &[1.0, 1.0]);
    }

    #[test]
    fn strong_regime_adjustments() {
        let l = LogitVector::new(vec![0.0, 0.0, 0.0]).unwrap();
        let out = apply_bias(&l, &BiasPlan::all_vocab(set(&[2])), &BiasSpec::new(5.0, 1.0)).unwrap();
        assert_eq!(out.values(), &[-1.0, -1.0, 5.0]);
    }

    #[test]
    fn labels_only_scope_leaves_other_tokens_alone() {
        let o = Ontology::from_json(
            r#"{"nodes":[{"id":"A","label":"Alpha"},{"id":"B","label":"Beta Alpha"},{"id":"C","label":"Gamma"}]}"#,
        )
        .unwrap();
        let vocab = Vocabulary::from_tokens(["alpha", "beta", "gamma", "filler"]);
        let plan = BiasPlan::new(&o, &["A"], &vocab, BiasScope::OntologyLabelsOnly).unwrap();
        assert_eq!(plan.boosted, set(&[0]));
        // alpha is shared with B but stays boosted
        assert_eq!(plan.penalized, Some(set(&[1, 2])));
        let l = LogitVector::new(vec![0.0; 4]).unwrap();
        let spec = BiasSpec { beta: 1.0, gamma: 0.5, scope: BiasScope::OntologyLabelsOnly };
        let out = apply_bias(&l, &plan, &spec).unwrap();
        assert_eq!(out.values(), &[1.0, -0.5, -0.5, 0.0]);
    }

    #[test]
    fn unknown_tokens_and_bad_specs() {
        let l = LogitVector::new(vec![0.0; 2]).unwrap();
        assert!(matches!(
            apply_bias(&l, &BiasPlan::all_vocab(set(&[5])), &BiasSpec::default()),
            Err(DecodeError::UnknownToken(5))
        ));
        assert!(matches!(
            apply_bias(&l, &BiasPlan::all_vocab(set(&[0])), &BiasSpec::new(-1.0, 0.0)),
            Err(DecodeError::InvalidBias(_))
        ));
        assert!(LogitVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn bias_token_sets() {
        let o = Ontology::from_json(
            r#"{"nodes":[{"id":"A","label":"A"},{"id":"B","label":"B"},{"id":"M","label":"Add To Cart"}]}"#,
        )
        .unwrap();
        let vocab = Vocabulary::from_tokens(["a", "b", "add", "to", "cart"]);
        assert_eq!(bias_tokens(&o, &["A", "B"], &vocab).unwrap(), set(&[0, 1]));
        assert_eq!(bias_tokens(&o, &["M"], &vocab).unwrap(), set(&[2, 3, 4]));
        let empty: [&str; 0] = [];
        assert!(bias_tokens(&o, &empty, &vocab).unwrap().is_empty());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax(&[10.0, -10.0]);
        assert!(p[0] > 0.999_999);
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;

        proptest! {
            #[test]
            fn shifts_preserve_argmax_within_each_group(
                values in proptest::collection::vec(-5.0f64..5.0, 2..40),
                mask in proptest::collection::vec(any::<bool>(), 40),
                beta in 0.0f64..3.0,
                gamma in 0.0f64..3.0,
            ) {
                let n = values.len();
                let boosted: BTreeSet<TokenId> = (0..n).filter(|&i| mask[i]).map(|i| i as TokenId).collect();
                let l = LogitVector::new(values.clone()).unwrap();
                let out = apply_bias(&l, &BiasPlan::all_vocab(boosted.clone()), &BiasSpec::new(beta, gamma)).unwrap();
                for inside in [true, false] {
                    let group: Vec<usize> =
                        (0..n).filter(|&i| boosted.contains(&(i as TokenId)) == inside).collect();
                    if let Some(&best) = group.iter().max_by(|&&a, &&b| values[a].total_cmp(&values[b])) {
                        let top = group.iter().map(|&i| out.values()[i]).fold(f64::NEG_INFINITY, f64::max);
                        prop_assert_eq!(out.values()[best], top);
                    }
                }
            }
        }
    }
}
