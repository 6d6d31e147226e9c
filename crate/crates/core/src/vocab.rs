//! The closed caption vocabulary shared by the data generator and the model.

pub const UNK: usize = 0;
pub const BOS: usize = 1;

pub const COLORS: [&str; 12] = [
    "red", "orange", "yellow", "lime", "green", "teal", "cyan", "azure", "blue", "violet",
    "magenta", "pink",
];
pub const PATTERNS: [&str; 5] = ["striped", "checkered", "dotted", "diagonal", "wavy"];
pub const CATEGORIES: [&str; 5] = ["bottle", "box", "can", "tube", "bag"];
const FILLER: [&str; 5] = ["a", "next", "to", "person", "with"];

/// Every word, indexed by token id.
pub fn words() -> Vec<&'static str> {
    let mut v = vec!["<unk>", "<bos>"];
    v.extend(FILLER);
    v.extend(COLORS);
    v.extend(PATTERNS);
    v.extend(CATEGORIES);
    v
}

pub fn size() -> usize {
    2 + FILLER.len() + COLORS.len() + PATTERNS.len() + CATEGORIES.len()
}

/// Lower-cased whitespace tokens, `<bos>` first, unknown words as `<unk>`.
pub fn tokenize(text: &str) -> Vec<usize> {
    let table = words();
    std::iter::once(BOS)
        .chain(text.split_whitespace().map(|w| {
            let w = w.to_lowercase();
            table.iter().position(|&t| t == w).unwrap_or(UNK)
        }))
        .collect()
}
