use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::archive::{ModelKind, ParameterArchive};
use crate::error::{Error, Result};
use crate::params::{is_buffer, ParamSet};
use crate::text::Vocabulary;

/// Name-prefix set whose parameters stay fixed during a stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FreezePolicy {
    pub prefixes: Vec<String>,
}

impl FreezePolicy {
    pub fn new<S: Into<String>>(prefixes: impl IntoIterator<Item = S>) -> Self {
        Self {
            prefixes: prefixes.into_iter().map(Into::into).collect(),
        }
    }

    /// The decoder-only fine-tuning policy: embedding, convolutions and BiLSTM.
    pub fn encoder() -> Self {
        Self::new(["encoder."])
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }

    pub fn matches(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Every prefix must select at least one parameter.
    pub fn check(&self, params: &ParamSet) -> Result<()> {
        for p in &self.prefixes {
            if p.is_empty() {
                return Err(Error::Plan("empty freeze prefix".into()));
            }
            if !params.names().any(|n| n.starts_with(p.as_str())) {
                return Err(Error::Plan(format!("freeze prefix {p:?} matches no parameter")));
            }
        }
        Ok(())
    }
}

/// Names of embedding tensors (the last path component is `embedding`).
pub fn embedding_names(params: &ParamSet) -> Vec<String> {
    params
        .names()
        .filter(|n| n.rsplit('.').next() == Some("embedding"))
        .cloned()
        .collect()
}

/// Drops the input-symbol embedding and re-initializes it for `vocab` with a
/// seeded Xavier draw; every other tensor is carried over untouched.
pub fn surgery_reset_embedding(a: &ParameterArchive, vocab: &Vocabulary, seed: u64) -> Result<ParameterArchive> {
    if a.meta.kind != ModelKind::Acoustic {
        return Err(Error::Archive("embedding surgery needs an acoustic archive".into()));
    }
    let names = embedding_names(&a.params);
    let name = match names.as_slice() {
        [one] => one.clone(),
        [] => return Err(Error::Archive("archive has no embedding tensor".into())),
        many => return Err(Error::Archive(format!("archive has {} embedding tensors: {many:?}", many.len()))),
    };
    let old = a.params.get(&name)?;
    let dim = old.value.shape()[1];
    let mut fresh = ParamSet::new();
    fresh.insert_xavier(&name, &[vocab.len(), dim], &mut ChaCha8Rng::seed_from_u64(seed))?;
    let value = fresh.remove(&name).expect("just inserted").value;

    let mut out = a.clone();
    out.params.get_mut(&name)?.value = value;
    out.meta.vocabulary = Some(vocab.to_file_string());
    out.meta.vocabulary_fingerprint = Some(vocab.fingerprint());
    out.sync_meta();
    out.validate()?;
    Ok(out)
}

/// Clears the trainable flag of every name the policy matches and sets it
/// for all others (buffers always stay non-trainable).
pub fn apply_freeze(a: &ParameterArchive, policy: &FreezePolicy) -> Result<ParameterArchive> {
    policy.check(&a.params)?;
    let mut out = a.clone();
    for (name, p) in out.params.iter_mut() {
        p.trainable = !is_buffer(name) && !policy.matches(name);
    }
    out.sync_meta();
    Ok(out)
}
