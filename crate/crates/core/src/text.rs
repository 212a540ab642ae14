//! String canonicalization shared by gold labels, predictions and model input.

/// Lowercase, trim, and collapse internal whitespace runs to one space.
pub fn normalize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Whitespace tokens of a string.
pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Token-overlap F1 between two strings (multiset overlap of whitespace words).
pub fn token_f1(a: &str, b: &str) -> f64 {
    let a = words(a);
    let b = words(b);
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut remaining: Vec<&str> = b.clone();
    let mut common = 0usize;
    for w in &a {
        if let Some(pos) = remaining.iter().position(|x| x == w) {
            remaining.swap_remove(pos);
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / a.len() as f64;
    let r = common as f64 / b.len() as f64;
    2.0 * p * r / (p + r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_collapses() {
        assert_eq!(normalize("  Don  Pasquale\tPizzeria "), "don pasquale pizzeria");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize(&normalize("A  b")), normalize("A  b"));
    }

    #[test]
    fn f1_overlap() {
        assert_eq!(token_f1("golden curry", "golden curry"), 1.0);
        assert_eq!(token_f1("golden", "golden curry"), 2.0 * 1.0 * 0.5 / 1.5);
        assert_eq!(token_f1("a", "b"), 0.0);
        assert_eq!(token_f1("", "b"), 0.0);
    }
}
