//! Brute-force metric oracles: string-keyed n-gram scans, subsequence
//! enumeration and exhaustive alignment search.

use std::collections::BTreeMap;

fn grams(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].join(" ")).collect()
}

fn count(list: &[String], g: &str) -> usize {
    list.iter().filter(|x| x.as_str() == g).count()
}

fn distinct(list: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

/// (clipped matches, candidate n-grams) for order n.
pub fn clipped(cand: &[String], refs: &[Vec<String>], n: usize) -> (usize, usize) {
    let cg = grams(cand, n);
    let mut m = 0;
    for g in distinct(&cg) {
        let best_ref = refs.iter().map(|r| count(&grams(r, n), &g)).max().unwrap_or(0);
        m += count(&cg, &g).min(best_ref);
    }
    (m, cg.len())
}

pub fn closest_len(c: usize, refs: &[Vec<String>]) -> usize {
    let mut best: Option<usize> = None;
    for r in refs {
        let l = r.len();
        best = match best {
            None => Some(l),
            Some(b) => {
                let (db, dl) = ((b as i64 - c as i64).abs(), (l as i64 - c as i64).abs());
                if dl < db || (dl == db && l < b) {
                    Some(l)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.unwrap_or(0)
}

fn bleu_from(m: &[usize], t: &[usize], c: usize, r: usize, n_max: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let mut prod = 1.0f64;
    for n in 0..n_max {
        if m[n] == 0 || t[n] == 0 {
            return 0.0;
        }
        prod *= m[n] as f64 / t[n] as f64;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * prod.powf(1.0 / n_max as f64)
}

pub fn bleu(cand: &[String], refs: &[Vec<String>], n_max: usize) -> f64 {
    let (mut m, mut t) = (vec![], vec![]);
    for n in 1..=n_max {
        let (a, b) = clipped(cand, refs, n);
        m.push(a);
        t.push(b);
    }
    bleu_from(&m, &t, cand.len(), closest_len(cand.len(), refs), n_max)
}

pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], n_max: usize) -> f64 {
    let (mut m, mut t) = (vec![0; n_max], vec![0; n_max]);
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in pairs {
        for n in 1..=n_max {
            let (a, b) = clipped(cand, refs, n);
            m[n - 1] += a;
            t[n - 1] += b;
        }
        c += cand.len();
        r += closest_len(cand.len(), refs);
    }
    bleu_from(&m, &t, c, r, n_max)
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|w| it.any(|x| x == *w))
}

/// Longest common subsequence by enumerating every subset of `a`.
pub fn lcs_brute(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16, "brute force LCS limited to 16 tokens");
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if is_subsequence(&sub, b) {
            best = k;
        }
    }
    best
}

pub fn rouge_l(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for r in refs {
        if cand.is_empty() || r.is_empty() {
            continue;
        }
        let l = lcs_brute(cand, r) as f64;
        if l == 0.0 {
            continue;
        }
        let (rec, prec) = (l / r.len() as f64, l / cand.len() as f64);
        let b2 = 1.2f64 * 1.2;
        best = best.max((1.0 + b2) * rec * prec / (rec + b2 * prec));
    }
    best
}

fn chunks_of(pairs: &[(usize, usize)]) -> usize {
    let mut sorted = pairs.to_vec();
    sorted.sort();
    let mut chunks = 0;
    for (k, &(i, j)) in sorted.iter().enumerate() {
        let continues = k > 0 && sorted[k - 1] == (i.wrapping_sub(1), j.wrapping_sub(1));
        if !continues {
            chunks += 1;
        }
    }
    chunks
}

/// (max matches, min chunks among maximal alignments) by trying every
/// one-to-one exact alignment.
pub fn meteor_alignment_brute(cand: &[String], r: &[String]) -> (usize, usize) {
    fn go(i: usize, cand: &[String], r: &[String], used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == cand.len() {
            let m = pairs.len();
            let ch = chunks_of(pairs);
            if m > best.0 || (m == best.0 && ch < best.1) {
                *best = (m, ch);
            }
            return;
        }
        go(i + 1, cand, r, used, pairs, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == cand[i] {
                used[j] = true;
                pairs.push((i, j));
                go(i + 1, cand, r, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0);
    go(0, cand, r, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    best
}

pub fn meteor(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for r in refs {
        if cand.is_empty() || r.is_empty() {
            continue;
        }
        let (m, ch) = meteor_alignment_brute(cand, r);
        if m == 0 {
            continue;
        }
        let (p, rec) = (m as f64 / cand.len() as f64, m as f64 / r.len() as f64);
        let fmean = 10.0 * p * rec / (rec + 9.0 * p);
        let frag = ch as f64 / m as f64;
        best = best.max(fmean * (1.0 - 0.5 * frag * frag * frag));
    }
    best
}

/// Per-image CIDEr: tf-idf over n-gram strings, idf = ln(N / max(1, df)).
pub fn cider(cands: &BTreeMap<String, Vec<String>>, refs: &BTreeMap<String, Vec<Vec<String>>>) -> BTreeMap<String, f64> {
    let n_images = refs.len() as f64;
    let mut out: BTreeMap<String, f64> = cands.keys().map(|k| (k.clone(), 0.0)).collect();
    for n in 1..=4 {
        let mut df: BTreeMap<String, f64> = BTreeMap::new();
        for rs in refs.values() {
            let mut seen: Vec<String> = Vec::new();
            for r in rs {
                for g in grams(r, n) {
                    if !seen.contains(&g) {
                        seen.push(g);
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        let vec_of = |toks: &[String]| -> BTreeMap<String, f64> {
            let gs = grams(toks, n);
            distinct(&gs)
                .into_iter()
                .map(|g| {
                    let tf = count(&gs, &g) as f64;
                    let d = df.get(&g).copied().unwrap_or(0.0).max(1.0);
                    let w = tf * (n_images / d).ln();
                    (g, w)
                })
                .collect()
        };
        for (id, c) in cands {
            let cv = vec_of(c);
            let mut total = 0.0;
            for r in &refs[id] {
                let rv = vec_of(r);
                let dot: f64 = cv.iter().map(|(g, x)| x * rv.get(g).copied().unwrap_or(0.0)).sum();
                let nc: f64 = cv.values().map(|x| x * x).sum::<f64>().sqrt();
                let nr: f64 = rv.values().map(|x| x * x).sum::<f64>().sqrt();
                total += if nc > 0.0 && nr > 0.0 { dot / (nc * nr) } else { 0.0 };
            }
            *out.get_mut(id).unwrap() += 10.0 * (total / refs[id].len() as f64) / 4.0;
        }
    }
    out
}

pub fn tuple_f1(cand: &[Vec<String>], r: &[Vec<String>]) -> f64 {
    let norm = |ts: &[Vec<String>]| {
        let mut out: Vec<Vec<String>> = Vec::new();
        for t in ts {
            let t: Vec<String> = t.iter().map(|s| s.to_lowercase()).collect();
            if !out.contains(&t) {
                out.push(t);
            }
        }
        out
    };
    let (c, r) = (norm(cand), norm(r));
    let hit = c.iter().filter(|t| r.contains(t)).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let (p, rec) = (hit / c.len() as f64, hit / r.len() as f64);
    2.0 * p * rec / (p + rec)
}
