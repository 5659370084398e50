//! Case- and diacritic-insensitive phrase matching that maps hits back to
//! byte ranges of the original text.

use crate::ocr_refine::fold;

/// Folded view of a text: lowercase, no diacritics, curly apostrophes made
/// straight, whitespace runs collapsed to one space.
#[derive(Debug, Clone)]
pub struct FoldedText {
    folded: String,
    // original byte range of the character each folded byte came from
    origin: Vec<(usize, usize)>,
}

pub fn fold_phrase(text: &str) -> String {
    FoldedText::new(text).folded
}

impl FoldedText {
    pub fn new(text: &str) -> Self {
        let mut folded = String::with_capacity(text.len());
        let mut origin = Vec::with_capacity(text.len());
        let mut last_space = true;
        for (start, c) in text.char_indices() {
            let end = start + c.len_utf8();
            let piece = if c.is_whitespace() {
                if last_space {
                    continue;
                }
                " ".to_string()
            } else if matches!(c, '\u{2019}' | '\u{2018}' | '`') {
                "'".to_string()
            } else {
                let mut buf = [0u8; 4];
                fold(c.encode_utf8(&mut buf))
            };
            if piece.is_empty() {
                continue;
            }
            last_space = piece == " ";
            for _ in 0..piece.len() {
                origin.push((start, end));
            }
            folded.push_str(&piece);
        }
        if folded.ends_with(' ') {
            folded.pop();
            origin.pop();
        }
        Self { folded, origin }
    }

    pub fn as_str(&self) -> &str {
        &self.folded
    }

    fn boundary_ok(&self, start: usize, end: usize) -> bool {
        let before = self.folded[..start].chars().next_back();
        let after = self.folded[end..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    }

    /// Whole-word occurrences of an already folded needle, as original byte
    /// ranges, left to right and non-overlapping.
    pub fn find_all(&self, needle: &str) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if needle.is_empty() {
            return out;
        }
        let mut from = 0;
        while let Some(pos) = self.folded[from..].find(needle) {
            let start = from + pos;
            let end = start + needle.len();
            if self.boundary_ok(start, end) {
                out.push((self.origin[start].0, self.origin[end - 1].1));
                from = end;
            } else {
                from = start + self.folded[start..].chars().next().map_or(1, char::len_utf8);
            }
        }
        out
    }
}

/// Collapses whitespace runs to single spaces and trims.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
