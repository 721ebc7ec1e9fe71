use std::collections::HashMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{EmbeddingVector, Embedder, GenerationRequest, Generator, ServiceError};

/// First eight bytes of SHA-256, little endian. Stable across platforms and
/// releases, unlike `std`'s hasher.
pub fn stable_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Pulls a table key out of a prompt, e.g. the target item id.
pub type KeyExtractor = Arc<dyn Fn(&str) -> Option<String> + Send + Sync>;

/// Deterministic offline generator.
///
/// Lookup order for a request:
/// 1. an exact scripted response list for `user_text`;
/// 2. the table row whose key the extractor finds in `user_text`;
/// 3. the table row at `stable_hash(user_text) % len`.
///
/// From the chosen starting row, `num_return_sequences` entries are taken by
/// cycling through the table (scripted lists cycle over themselves).
#[derive(Clone, Default)]
pub struct MockGenerator {
    table: Vec<(String, String)>,
    index: HashMap<String, usize>,
    scripts: HashMap<String, Vec<String>>,
    extractor: Option<KeyExtractor>,
    max_in_flight: usize,
}

impl MockGenerator {
    pub fn new(table: Vec<(String, String)>) -> Self {
        let index = table
            .iter()
            .enumerate()
            .map(|(i, (k, _))| (k.clone(), i))
            .collect();
        Self {
            table,
            index,
            scripts: HashMap::new(),
            extractor: None,
            max_in_flight: 1,
        }
    }

    pub fn with_extractor(mut self, extractor: KeyExtractor) -> Self {
        self.extractor = Some(extractor);
        self
    }

    pub fn with_script(mut self, user_text: impl Into<String>, responses: Vec<String>) -> Self {
        self.script(user_text, responses);
        self
    }

    pub fn script(&mut self, user_text: impl Into<String>, responses: Vec<String>) {
        self.scripts.insert(user_text.into(), responses);
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn table(&self) -> &[(String, String)] {
        &self.table
    }
}

impl Generator for MockGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, ServiceError> {
        request.validate()?;
        let n = request.num_return_sequences as usize;
        if let Some(responses) = self.scripts.get(&request.user_text) {
            if !responses.is_empty() {
                return Ok(responses.iter().cycle().take(n).cloned().collect());
            }
        }
        if self.table.is_empty() {
            return Ok(vec![String::new(); n]);
        }
        let start = self
            .extractor
            .as_ref()
            .and_then(|f| f(&request.user_text))
            .and_then(|key| self.index.get(&key).copied())
            .unwrap_or_else(|| (stable_hash(&request.user_text) % self.table.len() as u64) as usize);
        Ok((0..n)
            .map(|r| self.table[(start + r) % self.table.len()].1.clone())
            .collect())
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

/// Feature-hashing bag-of-words embedder: each lowercase word and adjacent
/// word pair adds a signed unit to a hashed coordinate; the result is
/// L2-normalized. Good enough to give lexically similar items nearby vectors
/// offline.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(2) }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut values = vec![0.0; self.dim];
        let mut add = |feature: &str| {
            let h = stable_hash(feature);
            let idx = (h % self.dim as u64) as usize;
            values[idx] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        };
        for w in &words {
            add(w);
        }
        for pair in words.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // No features, or they cancelled out; fall back to the raw text.
            let h = stable_hash(text);
            values[(h % self.dim as u64) as usize] = 1.0;
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector { values }
    }
}

impl Embedder for HashingEmbedder {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ServiceError> {
        if texts.is_empty() {
            return Err(ServiceError::InvalidRequest("no texts to embed".into()));
        }
        if let Some(idx) = texts.iter().position(|t| t.is_empty()) {
            return Err(ServiceError::InvalidRequest(format!("text {idx} is empty")));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(text: &str, n: u32) -> GenerationRequest {
        GenerationRequest {
            system_text: String::new(),
            user_text: text.into(),
            max_new_tokens: 30,
            num_return_sequences: n,
            temperature: 0.0,
        }
    }

    fn table(n: usize) -> Vec<(String, String)> {
        (0..n).map(|i| (format!("k{i}"), format!("v{i}"))).collect()
    }

    #[test]
    fn deterministic() {
        let m = MockGenerator::new(table(7));
        assert_eq!(
            m.generate(&req("hello", 4)).unwrap(),
            m.generate(&req("hello", 4)).unwrap()
        );
    }

    #[test]
    fn single_entry_repeats() {
        let m = MockGenerator::new(table(1));
        assert_eq!(m.generate(&req("anything", 3)).unwrap(), ["v0", "v0", "v0"]);
    }

    #[test]
    fn cycles_over_small_table() {
        let m = MockGenerator::new(table(2));
        let out = m.generate(&req("x", 3)).unwrap();
        let start = (stable_hash("x") % 2) as usize;
        let expect: Vec<String> = (0..3).map(|r| format!("v{}", (start + r) % 2)).collect();
        assert_eq!(out, expect);
        assert_eq!(out[0], out[2]);
        assert_ne!(out[0], out[1]);
    }

    #[test]
    fn extractor_and_script_take_precedence() {
        let m = MockGenerator::new(table(5))
            .with_extractor(Arc::new(|t: &str| t.strip_prefix("id=").map(str::to_owned)))
            .with_script("scripted", vec!["a".into(), "b".into()]);
        assert_eq!(m.generate(&req("id=k3", 2)).unwrap(), ["v3", "v4"]);
        assert_eq!(m.generate(&req("scripted", 3)).unwrap(), ["a", "b", "a"]);
    }

    #[test]
    fn hashing_embedder_is_unit_norm() {
        let e = HashingEmbedder::new(32);
        let v = e.embed_batch(&["red lip balm".into(), "!!!".into()]).unwrap();
        for x in v {
            let n: f64 = x.values.iter().map(|a| a * a).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
