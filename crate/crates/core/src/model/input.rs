use crate::corpus::TestAssertPair;
use crate::tokenizer::{TokenId, CLS_ID, COMMENT_ID, NEWLINE_ID};

/// Text form of the augmented input: `[CLS] ft \n // g \n a`, or `[CLS] ft`
/// when nothing was retrieved.
pub fn assemble_augmented_input(ft: &str, retrieved: Option<&TestAssertPair>) -> String {
    match retrieved {
        Some(r) => format!("[CLS] {ft} \n // {} \n {}", r.focal_test, r.assertion),
        None => format!("[CLS] {ft}"),
    }
}

/// Pre-tokenized retrieved pair.
#[derive(Debug, Clone, Copy)]
pub struct RetrievedTokens<'t> {
    pub focal_test: &'t [TokenId],
    pub assertion: &'t [TokenId],
}

/// Token-level assembly matching [`assemble_augmented_input`]. When the
/// result would exceed `max_len`, the retrieved portion is cut from its end;
/// the query is only cut if it cannot fit on its own.
pub fn assemble_input_ids(query: &[TokenId], retrieved: Option<RetrievedTokens<'_>>, max_len: usize) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(max_len.min(
        1 + query.len() + retrieved.map_or(0, |r| 3 + r.focal_test.len() + r.assertion.len()),
    ));
    ids.push(CLS_ID);
    let q = query.len().min(max_len.saturating_sub(1));
    ids.extend_from_slice(&query[..q]);
    if let Some(r) = retrieved {
        let tail = [NEWLINE_ID, COMMENT_ID]
            .iter()
            .chain(r.focal_test)
            .chain(std::iter::once(&NEWLINE_ID))
            .chain(r.assertion);
        let room = max_len.saturating_sub(ids.len());
        ids.extend(tail.take(room));
    }
    ids
}
