//! Word/punctuation splitting shared by the toy tokenizer and the text metrics.

/// Splits text into pieces: maximal runs of alphabetic characters, single
/// ASCII digits, and single characters of anything else (whitespace and
/// punctuation included). Concatenating the pieces gives back the input.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphabetic() {
            if run_start.is_none() {
                run_start = Some(i);
            }
            continue;
        }
        if let Some(start) = run_start.take() {
            pieces.push(&text[start..i]);
        }
        pieces.push(&text[i..i + ch.len_utf8()]);
    }
    if let Some(start) = run_start {
        pieces.push(&text[start..]);
    }
    pieces
}

/// Lowercased non-whitespace pieces, the token stream the text metrics score.
pub fn metric_tokens(text: &str) -> Vec<String> {
    pretokenize(text)
        .into_iter()
        .filter(|p| !p.chars().all(char::is_whitespace))
        .map(str::to_lowercase)
        .collect()
}

/// Case-folds and collapses internal whitespace.
pub fn normalize_span(span: &str) -> String {
    span.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pieces_concatenate_back() {
        let s = "Rank 12 items, é-cafés\tnow!";
        let p = pretokenize(s);
        assert_eq!(p.concat(), s);
        assert_eq!(&p[..6], &["Rank", " ", "1", "2", " ", "items"]);
    }

    #[test]
    fn metric_tokens_drop_whitespace() {
        assert_eq!(metric_tokens("The  red\ncat."), vec!["the", "red", "cat", "."]);
    }

    #[test]
    fn span_normalization() {
        assert_eq!(normalize_span("  Red   Large\tBox "), "red large box");
    }
}
