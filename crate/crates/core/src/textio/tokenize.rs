/// Split text into lowercase tokens.
///
/// Rules, applied to each whitespace-separated chunk:
/// - runs of alphanumerics form a token; `'` and `-` join two alphanumeric
///   runs (`don't`, `state-of-the-art`), `.` and `,` join two digit runs
///   (`3.5`, `1,000`);
/// - dotted single-letter abbreviations stay whole (`u.s.`, `e.g.`);
/// - any other character is a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().flat_map(char::to_lowercase).collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if !c.is_alphanumeric() {
                out.push(c.to_string());
                i += 1;
                continue;
            }
            if let Some(end) = abbreviation_end(&chars, i) {
                out.push(chars[i..end].iter().collect());
                i = end;
                continue;
            }
            let mut j = i;
            while j < chars.len() {
                if chars[j].is_alphanumeric() {
                    j += 1;
                } else if j + 1 < chars.len() && joins(chars[j - 1], chars[j], chars[j + 1]) {
                    j += 2;
                } else {
                    break;
                }
            }
            out.push(chars[i..j].iter().collect());
            i = j;
        }
    }
    out
}

fn joins(prev: char, c: char, next: char) -> bool {
    match c {
        '\'' | '\u{2019}' | '-' => prev.is_alphanumeric() && next.is_alphanumeric(),
        '.' | ',' => prev.is_ascii_digit() && next.is_ascii_digit(),
        _ => false,
    }
}

/// End of a `x.y.` style abbreviation starting at `start` (at least two
/// letter-dot pairs, not followed by another alphanumeric).
fn abbreviation_end(chars: &[char], start: usize) -> Option<usize> {
    let mut k = start;
    let mut pairs = 0;
    while k + 1 < chars.len() && chars[k].is_alphabetic() && chars[k + 1] == '.' {
        pairs += 1;
        k += 2;
    }
    let followed_by_word = k < chars.len() && chars[k].is_alphanumeric();
    (pairs >= 2 && !followed_by_word).then_some(k)
}
