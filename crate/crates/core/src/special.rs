//! Reserved token ids shared by the vocabulary, batching and decoding.

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
/// Id of the first language tag `<L1>`; tag `<Lk>` has id `FIRST_TAG + k - 1`.
pub const FIRST_TAG: u32 = 5;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const MASK_TOKEN: &str = "<mask>";

/// Surface form of the language tag for source `k` (1-based).
pub fn tag_token(k: usize) -> String {
    format!("<L{k}>")
}

pub fn tag_id(k: usize) -> u32 {
    FIRST_TAG + k as u32 - 1
}
