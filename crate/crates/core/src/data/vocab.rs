use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

/// Named object colors. These four are the only colors a caption mentions.
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "cross"];

const TOY_WORDS: &[&str] = &[
    "<pad>", "<bos>", "<eos>", // colors, named first so their ids are stable
    "red", "green", "blue", "yellow", "black", "white", "gray", "orange", "purple", "pink", // shapes
    "square", "circle", "triangle", "cross", "star", "ring", "line", "dot", // positions
    "top", "bottom", "left", "right", "center", "middle", // template words
    "what", "color", "is", "the", "shape", "where", "describe", "image", "it", "a", "an", "of", "in", "on", "and",
    "this", "picture", "object", "there", "which", "tell", "me", ",", ".",
];

pub const TOY_VOCAB_SIZE: usize = 64;

/// Token strings indexed by id; ids are dense in `[0, len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[PAD] != "<pad>" || tokens[BOS] != "<bos>" || tokens[EOS] != "<eos>" {
            return Err(Error::Config("vocabulary must start with <pad>, <bos>, <eos>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("token {id} is empty or contains whitespace")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// The 64-entry toy vocabulary; ids past the named words are `<unused_k>` fillers.
    pub fn toy() -> Self {
        let mut tokens: Vec<String> = TOY_WORDS.iter().map(|s| s.to_string()).collect();
        let mut k = 0;
        while tokens.len() < TOY_VOCAB_SIZE {
            tokens.push(format!("<unused_{k}>"));
            k += 1;
        }
        Vocabulary::new(tokens).expect("toy vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenId { id, size: self.len() })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids.iter().map(|&id| self.token(id)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn color_ids(&self) -> Vec<TokenId> {
        COLORS.iter().map(|c| self.index[*c]).collect()
    }

    /// One token string per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Vocabulary::new(text.lines().map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn toy_vocab_is_dense_and_sized() {
        let v = Vocabulary::toy();
        assert_eq!(v.len(), TOY_VOCAB_SIZE);
        assert_eq!(v.token(PAD).unwrap(), "<pad>");
        assert_eq!(v.id("red").unwrap(), 3);
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id).unwrap()).unwrap(), id);
        }
    }

    #[test]
    fn empty_text_round_trips() {
        let v = Vocabulary::toy();
        let ids = v.encode("").unwrap();
        assert!(ids.is_empty());
        assert_eq!(v.decode(&ids).unwrap(), "");
    }

    #[test]
    fn red_square_round_trips() {
        let v = Vocabulary::toy();
        let ids = v.encode("red square").unwrap();
        assert_eq!(ids, vec![v.id("red").unwrap(), v.id("square").unwrap()]);
        assert_eq!(v.decode(&ids).unwrap(), "red square");
    }

    #[test]
    fn unknown_word_is_named() {
        let v = Vocabulary::toy();
        let err = v.encode("red hexagon").unwrap_err();
        assert!(err.to_string().contains("hexagon"));
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        let v = Vocabulary::toy();
        assert!(matches!(v.decode(&[64]), Err(Error::TokenId { id: 64, size: 64 })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::toy();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    proptest! {
        #[test]
        fn ten_word_sentences_round_trip(ids in proptest::collection::vec(0usize..TOY_VOCAB_SIZE, 10)) {
            let v = Vocabulary::toy();
            let text = v.decode(&ids).unwrap();
            prop_assert_eq!(v.encode(&text).unwrap(), ids);
            prop_assert_eq!(v.decode(&v.encode(&text).unwrap()).unwrap(), text);
        }
    }
}
