//! Brute-force reference implementations used to check the production
//! analysis. Deliberately naive and self-contained: nothing here calls into
//! `consensus` or `biaslens`.

use std::collections::{BTreeMap, BTreeSet};

use crate::casemodel::{ModelResponse, ResponseStatus};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoResponders;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub tier: Option<&'static str>,
    pub top1: usize,
    pub any_mention: usize,
    pub supporters: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleDifferential {
    pub responding: usize,
    pub rows: BTreeMap<String, OracleRow>,
}

fn words(text: &str) -> Vec<String> {
    let mut cleaned = String::new();
    for ch in text.chars() {
        if ch == '\'' || ch == '’' || ch == '`' {
            continue;
        }
        if ch.is_alphanumeric() {
            for l in ch.to_lowercase() {
                cleaned.push(l);
            }
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split(' ').filter(|w| !w.is_empty()).map(String::from).collect()
}

/// Merge key of a (label, codes) pair.
pub fn oracle_key(label: &str, codes: &[String], synonyms: &[(String, String)]) -> String {
    if let Some(code) = codes.first() {
        let c: Vec<char> = code.chars().collect();
        if c.len() >= 3 && c[0].is_ascii_uppercase() && c[1].is_ascii_digit() && c[2].is_ascii_digit() {
            return c[..3].iter().collect::<String>().to_lowercase();
        }
    }
    let norm = words(label).join(" ");
    for (alias, canonical) in synonyms {
        if words(alias).join(" ") == norm {
            return words(canonical).join(" ");
        }
    }
    norm
}

pub fn oracle_stratify(
    responses: &[ModelResponse],
    synonyms: &[(String, String)],
) -> Result<OracleDifferential, NoResponders> {
    let mut responding = 0;
    for r in responses {
        if r.status == ResponseStatus::Ok {
            responding += 1;
        }
    }
    if responding == 0 {
        return Err(NoResponders);
    }
    let mut rows: BTreeMap<String, OracleRow> = BTreeMap::new();
    for r in responses {
        if r.status != ResponseStatus::Ok {
            continue;
        }
        let mut seen_here: Vec<String> = Vec::new();
        for (i, c) in r.candidates.iter().enumerate() {
            let key = oracle_key(&c.label, &c.icd10_codes, synonyms);
            let row = rows.entry(key.clone()).or_insert(OracleRow {
                tier: None,
                top1: 0,
                any_mention: 0,
                supporters: BTreeSet::new(),
            });
            if i == 0 {
                row.top1 += 1;
            }
            if !seen_here.contains(&key) {
                row.any_mention += 1;
                row.supporters.insert(r.model_id.clone());
                seen_here.push(key);
            }
        }
    }
    for row in rows.values_mut() {
        // percent comparisons on integers: votes/responding >= 30/100 etc.
        let v = row.top1 * 100;
        row.tier = if row.top1 == 0 {
            None
        } else if v >= 30 * responding {
            Some("Primary")
        } else if v >= 10 * responding {
            Some("Alternative")
        } else {
            Some("Minority")
        };
    }
    Ok(OracleDifferential { responding, rows })
}

/// Leading top-1 share.
pub fn oracle_consensus_rate(d: &OracleDifferential) -> f64 {
    let mut best = 0;
    for row in d.rows.values() {
        if row.top1 > best {
            best = row.top1;
        }
    }
    best as f64 / d.responding as f64
}

pub fn oracle_breadth(d: &OracleDifferential) -> usize {
    d.rows.len()
}

/// Greedy leftmost-longest phrase count over word tokens.
pub fn oracle_marker_count(text: &str, phrases: &[&str]) -> usize {
    let tokens = words(text);
    let phrase_tokens: Vec<Vec<String>> = phrases.iter().map(|p| words(p)).filter(|p| !p.is_empty()).collect();
    let mut count = 0;
    let mut i = 0;
    while i < tokens.len() {
        let mut longest = 0;
        for p in &phrase_tokens {
            if p.len() > longest && i + p.len() <= tokens.len() {
                let mut all = true;
                for j in 0..p.len() {
                    if tokens[i + j] != p[j] {
                        all = false;
                        break;
                    }
                }
                if all {
                    longest = p.len();
                }
            }
        }
        if longest > 0 {
            count += 1;
            i += longest;
        } else {
            i += 1;
        }
    }
    count
}
