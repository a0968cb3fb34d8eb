//! Answer-text normalization used by every inclusion-style metric.

use unicode_normalization::UnicodeNormalization;

/// Lowercases, applies NFC, turns every non-alphanumeric character into a
/// space, collapses runs of whitespace and trims.
///
/// Punctuation becomes a space rather than vanishing, so `"U.S."` and `"u s"`
/// normalize identically.
pub fn normalize_text(s: &str) -> String {
    let lowered: String = s.nfc().collect::<String>().to_lowercase().nfc().collect();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for c in lowered.chars() {
        if c.is_alphanumeric() && !c.is_uppercase() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Whitespace tokens of the normalized text.
pub fn normalized_tokens(s: &str) -> Vec<String> {
    normalize_text(s).split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_cases() {
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("  Santurce. "), "santurce");
        assert_eq!(normalize_text("Maniowy"), "maniowy");
        assert_eq!(normalize_text("U.S."), "u s");
        assert_eq!(normalize_text("Rüdiger\t\n  (born 1993)"), "rüdiger born 1993");
    }

    #[test]
    fn nfc_merges_decomposed_forms() {
        assert_eq!(normalize_text("Ru\u{0308}diger"), normalize_text("Rüdiger"));
    }

    proptest! {
        #[test]
        fn idempotent(s in any::<String>()) {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn canonical_shape(s in "\\PC{0,40}") {
            let out = normalize_text(&s);
            prop_assert!(!out.starts_with(' ') && !out.ends_with(' '));
            prop_assert!(!out.contains("  "));
            prop_assert!(!out.chars().any(char::is_uppercase));
        }
    }
}
