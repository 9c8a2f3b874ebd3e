use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::special::{self, BOS, EOS, FIRST_TAG, UNK};

/// Token list whose index is the id. Ids `0..FIRST_TAG + K` are reserved for
/// pad, bos, eos, unk, mask and the K language tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    tags: usize,
}

fn reserved(tags: usize) -> Vec<String> {
    let mut v: Vec<String> =
        [special::PAD_TOKEN, special::BOS_TOKEN, special::EOS_TOKEN, special::UNK_TOKEN, special::MASK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
    v.extend((1..=tags).map(special::tag_token));
    v
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, tags: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Corpus(format!("duplicate token `{t}` in vocabulary")));
            }
        }
        Ok(Vocabulary { tokens, index, tags })
    }

    /// Reserved block followed by every other whitespace token of `texts`,
    /// most frequent first, ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, tags: usize) -> Result<Self> {
        let mut tokens = reserved(tags);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        for r in &tokens {
            counts.remove(r.as_str());
        }
        if counts.is_empty() {
            return Err(Error::Corpus("empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens, tags)
    }

    /// Builds from every tab-separated field of every line of `paths`.
    pub fn build_from_files(paths: &[impl AsRef<Path>], tags: usize) -> Result<Self> {
        let mut texts = Vec::new();
        for p in paths {
            let p = p.as_ref();
            texts.push(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?);
        }
        Self::build(texts.iter().map(String::as_str), tags)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tags(&self) -> usize {
        self.tags
    }

    /// First id not in the reserved block.
    pub fn first_regular(&self) -> u32 {
        FIRST_TAG + self.tags as u32
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// `bos` + tokens + `eos`.
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(special::UNK_TOKEN)).collect::<Vec<_>>().join(" ")
    }

    /// Decodes a generated target, dropping bos/eos and stopping at eos.
    pub fn decode_target(&self, ids: &[u32]) -> String {
        let body: Vec<u32> = ids.iter().copied().skip_while(|&i| i == BOS).take_while(|&i| i != EOS).collect();
        self.decode(&body)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let tags =
            tokens.iter().skip(FIRST_TAG as usize).take_while(|t| t.starts_with("<L") && t.ends_with('>')).count();
        let expect = reserved(tags);
        if tokens.len() < expect.len() || tokens[..expect.len()] != expect[..] {
            return Err(Error::Corpus(format!("{}: missing reserved token block", path.display())));
        }
        Self::from_tokens(tokens, tags)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_example() {
        let v = Vocabulary::build(["a a b"], 2).unwrap();
        assert_eq!(v.len(), 9);
        assert_eq!(v.id("a"), 7);
        assert_eq!(v.id("b"), 8);
        assert_eq!(v.token(5), Some("<L1>"));
        assert_eq!(v.token(6), Some("<L2>"));
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocabulary::build(["c b a c"], 1).unwrap();
        assert_eq!(v.decode(&[6, 7, 8]), "c a b");
    }

    #[test]
    fn tags_in_text_keep_reserved_ids() {
        let v = Vocabulary::build(["<L1> x y", "<L2> y"], 2).unwrap();
        assert_eq!(v.encode("<L2> y x"), vec![6, 7, 8]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::build(["  ", "<L1>"], 1).is_err());
    }

    #[test]
    fn round_trips() {
        let v = Vocabulary::build(["p q r", "q r", "r"], 2).unwrap();
        assert_eq!(v.decode(&v.encode("r q p")), "r q p");
        let ids = vec![1, 7, 8, 9, 2, 5];
        assert_eq!(v.encode(&v.decode(&ids)), ids);
        assert_eq!(v.decode_target(&v.encode_target("q r")), "q r");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::build(["p q r", "q"], 3).unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }
}
