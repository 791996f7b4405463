//! Final-answer extraction and comparison.

/// Contents of the last `\boxed{...}` (or `\fbox{...}`) with balanced braces.
pub fn extract_boxed(text: &str) -> Option<String> {
    let mut best: Option<(usize, String)> = None;
    for marker in ["\\boxed{", "\\fbox{"] {
        let mut from = 0;
        while let Some(pos) = text[from..].find(marker) {
            let start = from + pos + marker.len();
            if let Some(inner) = balanced(&text[start..]) {
                if best.as_ref().is_none_or(|(p, _)| start > *p) {
                    best = Some((start, inner.to_string()));
                }
            }
            from = start;
        }
    }
    best.map(|(_, s)| s)
}

fn balanced(s: &str) -> Option<&str> {
    let mut depth = 1usize;
    for (i, c) in s.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[..i]);
                }
            }
            _ => {}
        }
    }
    None
}

const DROP: [&str; 9] = ["\\left", "\\right", "\\!", "\\,", "\\;", "\\:", "\\displaystyle", "^\\circ", "^{\\circ}"];

fn step(s: &str) -> String {
    let mut t: String = s.chars().filter(|c| !c.is_whitespace() && *c != '$').collect();
    for d in DROP {
        t = t.replace(d, "");
    }
    t = t.replace("\\dfrac", "\\frac").replace("\\tfrac", "\\frac");
    if let Some(inner) = t.strip_prefix("\\text{").and_then(|r| r.strip_suffix('}')) {
        if balanced(&format!("{inner}}}")) == Some(inner) {
            t = inner.to_string();
        }
    }
    while t.ends_with('.') {
        t.pop();
    }
    t = strip_thousands(&t);
    t.to_lowercase()
}

/// `1,234,567` → `1234567`; other commas stay.
fn strip_thousands(s: &str) -> String {
    let b: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    for i in 0..b.len() {
        if b[i] == ',' && i > 0 && b[i - 1].is_ascii_digit() {
            let group: Vec<char> = b[i + 1..].iter().take(4).copied().collect();
            let three = group.len() >= 3 && group[..3].iter().all(char::is_ascii_digit);
            let ends = group.len() == 3 || (group.len() == 4 && !group[3].is_ascii_digit());
            if three && ends {
                continue;
            }
        }
        out.push(b[i]);
    }
    out
}

/// Canonical answer form. Applied until it stops changing, so it is
/// idempotent.
pub fn normalize_answer(s: &str) -> String {
    let mut cur = s.to_string();
    loop {
        let next = step(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

/// Value of an integer, decimal, `a/b`, `\frac{a}{b}` or percentage.
pub fn numeric_value(s: &str) -> Option<f64> {
    let t = normalize_answer(s);
    let (t, scale) = match t.strip_suffix("\\%").or_else(|| t.strip_suffix('%')) {
        Some(rest) => (rest.to_string(), 0.01),
        None => (t, 1.0),
    };
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.as_str()),
    };
    let v = if let Some(rest) = body.strip_prefix("\\frac{") {
        let close = rest.find('}')?;
        let num: f64 = rest[..close].parse().ok()?;
        let den_part = rest[close + 1..].strip_prefix('{')?.strip_suffix('}')?;
        let den: f64 = den_part.parse().ok()?;
        num / den
    } else if let Some((a, b)) = body.split_once('/') {
        a.parse::<f64>().ok()? / b.parse::<f64>().ok()?
    } else {
        if !body.chars().all(|c| c.is_ascii_digit() || c == '.') {
            return None;
        }
        body.parse().ok()?
    };
    let v = if neg { -v } else { v } * scale;
    v.is_finite().then_some(v)
}

/// String match after normalization, then numeric equivalence.
pub fn answers_match(predicted: &str, gold: &str) -> bool {
    let (p, g) = (normalize_answer(predicted), normalize_answer(gold));
    if p == g {
        return true;
    }
    match (numeric_value(&p), numeric_value(&g)) {
        (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0),
        _ => false,
    }
}
