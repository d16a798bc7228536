//! Reading and writing interaction and score files, sparsity masking,
//! popularity filtering, and train/validation/test splitting.
//!
//! Interaction files are CSV with the header `user,item,chosen,correct`
//! and an optional fifth `position` column. Lines starting with `#` are
//! directives or comments:
//!
//! ```text
//! #options 3 5     item 3 has five options even if fewer were observed
//! #users 100       declare the user count
//! #items 40        declare the item count
//! ```
//!
//! Without directives the user, item and option counts are inferred as the
//! largest observed index plus one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::rng;

const INTERACTION_HEADER: [&str; 4] = ["user", "item", "chosen", "correct"];

fn parse_field<T: std::str::FromStr>(raw: &str, name: &str, line: usize) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("field `{name}`: cannot parse {:?} as an integer", raw.trim()),
    })
}

/// Parses an interaction CSV stream into a validated dataset.
pub fn parse_interactions<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut header_seen = false;
    let mut has_position = false;
    let mut declared_options: BTreeMap<usize, usize> = BTreeMap::new();
    let mut declared_users: Option<usize> = None;
    let mut declared_items: Option<usize> = None;
    let mut interactions = Vec::new();

    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(directive) = line.strip_prefix('#') {
            let mut parts = directive.split_whitespace();
            match parts.next() {
                Some("options") => {
                    let item: usize = parse_field(parts.next().unwrap_or(""), "item", lineno)?;
                    let count: usize = parse_field(parts.next().unwrap_or(""), "count", lineno)?;
                    declared_options.insert(item, count);
                }
                Some("users") => declared_users = Some(parse_field(parts.next().unwrap_or(""), "users", lineno)?),
                Some("items") => declared_items = Some(parse_field(parts.next().unwrap_or(""), "items", lineno)?),
                _ => {}
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !header_seen {
            let ok = fields.len() >= 4
                && fields[..4] == INTERACTION_HEADER
                && (fields.len() == 4 || (fields.len() == 5 && fields[4] == "position"));
            if !ok {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected header `user,item,chosen,correct[,position]`, found {line:?}"),
                });
            }
            has_position = fields.len() == 5;
            header_seen = true;
            continue;
        }
        let expected = if has_position { 5 } else { 4 };
        if fields.len() != expected {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        let mut x = Interaction::new(
            parse_field(fields[0], "user", lineno)?,
            parse_field(fields[1], "item", lineno)?,
            parse_field(fields[2], "chosen", lineno)?,
            parse_field(fields[3], "correct", lineno)?,
        );
        if has_position && !fields[4].is_empty() {
            x.position = Some(parse_field(fields[4], "position", lineno)?);
        }
        interactions.push(x);
    }
    if !header_seen {
        return Err(Error::Parse { line: 1, message: "missing header".into() });
    }

    let observed_users = interactions.iter().map(|x| x.user + 1).max().unwrap_or(0);
    let observed_items =
        interactions.iter().map(|x| x.item + 1).chain(declared_options.keys().map(|&i| i + 1)).max().unwrap_or(0);
    let num_users = declared_users.unwrap_or(0).max(observed_users);
    let num_items = declared_items.unwrap_or(0).max(observed_items);

    let mut options = vec![0usize; num_items];
    for x in &interactions {
        let needed = x.chosen.max(x.correct) + 1;
        options[x.item] = options[x.item].max(needed);
    }
    for (&item, &count) in &declared_options {
        options[item] = options[item].max(count);
    }
    // An item seen only with its keyed option still offers a distractor.
    for o in &mut options {
        *o = (*o).max(2);
    }
    Dataset::new(num_users, num_items, options, interactions, None)
}

/// Parses a `user,score` CSV stream.
pub fn parse_scores<R: BufRead>(reader: R) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    let mut header_seen = false;
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !header_seen {
            if fields != ["user", "score"] {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected header `user,score`, found {line:?}"),
                });
            }
            header_seen = true;
            continue;
        }
        if fields.len() != 2 {
            return Err(Error::Parse { line: lineno, message: format!("expected 2 fields, found {}", fields.len()) });
        }
        let user: usize = parse_field(fields[0], "user", lineno)?;
        let score: f64 = fields[1].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("field `score`: cannot parse {:?} as a number", fields[1]),
        })?;
        if out.insert(user, score).is_some() {
            return Err(Error::Parse { line: lineno, message: format!("duplicate score for user {user}") });
        }
    }
    Ok(out)
}

/// Reads an interaction file and, optionally, a score file.
pub fn load_dataset(interactions: &std::path::Path, scores: Option<&std::path::Path>) -> Result<Dataset> {
    let open = |p: &std::path::Path| {
        std::fs::File::open(p).map(std::io::BufReader::new).map_err(|e| Error::io(p.display(), e))
    };
    let d = parse_interactions(open(interactions)?)?;
    match scores {
        None => Ok(d),
        Some(path) => {
            let s = parse_scores(open(path)?)?;
            let d = d.with_scores(Some(s));
            let report = crate::data::validate_dataset(&d);
            if report.is_empty() {
                Ok(d)
            } else {
                Err(Error::Validation(report))
            }
        }
    }
}

/// Writes interactions in the CSV format read by [`parse_interactions`],
/// with directives that pin the user, item and option counts.
pub fn write_interactions<W: Write>(d: &Dataset, mut w: W) -> std::io::Result<()> {
    let with_pos = d.interactions().iter().any(|x| x.position.is_some());
    writeln!(w, "#users {}", d.num_users())?;
    writeln!(w, "#items {}", d.num_items())?;
    for (item, count) in d.options_per_item().iter().enumerate() {
        writeln!(w, "#options {item} {count}")?;
    }
    if with_pos {
        writeln!(w, "user,item,chosen,correct,position")?;
    } else {
        writeln!(w, "user,item,chosen,correct")?;
    }
    let mut line = String::new();
    for x in d.interactions() {
        line.clear();
        write!(line, "{},{},{},{}", x.user, x.item, x.chosen, x.correct).unwrap();
        if with_pos {
            match x.position {
                Some(p) => write!(line, ",{p}").unwrap(),
                None => line.push(','),
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_scores<W: Write>(scores: &BTreeMap<usize, f64>, mut w: W) -> std::io::Result<()> {
    writeln!(w, "user,score")?;
    for (user, score) in scores {
        writeln!(w, "{user},{score}")?;
    }
    Ok(())
}

/// Keeps `round((1 - drop_ratio) * len)` interactions drawn uniformly
/// without replacement. Surviving records keep their original order.
pub fn apply_sparsity_mask(d: &Dataset, drop_ratio: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&drop_ratio) {
        return Err(Error::Argument(format!("drop ratio must lie in [0, 1), got {drop_ratio}")));
    }
    let n = d.len();
    let keep = ((1.0 - drop_ratio) * n as f64).round() as usize;
    if keep == n {
        return Ok(d.clone());
    }
    let mut r = rng::substream(seed, "sparsity-mask");
    let mut picked = rand::seq::index::sample(&mut r, n, keep).into_vec();
    picked.sort_unstable();
    let kept = picked.into_iter().map(|k| d.interactions()[k]).collect();
    Ok(d.with_interactions(kept))
}

fn fraction_count(frac: f64, total: usize) -> usize {
    ((frac * total as f64) - 1e-9).ceil().max(0.0) as usize
}

fn top_indices(counts: &[usize], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Keeps the most-answered items and the most-active users, then
/// renumbers both densely (old order preserved). Popularity counts come
/// from the input dataset; ties go to the lower index.
pub fn top_n_filter(d: &Dataset, item_frac: f64, user_frac: f64) -> Result<Dataset> {
    for (name, f) in [("item", item_frac), ("user", user_frac)] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Argument(format!("{name} fraction must lie in (0, 1], got {f}")));
        }
    }
    let mut item_counts = vec![0usize; d.num_items()];
    let mut user_counts = vec![0usize; d.num_users()];
    for x in d.interactions() {
        item_counts[x.item] += 1;
        user_counts[x.user] += 1;
    }
    let items = top_indices(&item_counts, fraction_count(item_frac, d.num_items()));
    let users = top_indices(&user_counts, fraction_count(user_frac, d.num_users()));

    let mut item_map = vec![None; d.num_items()];
    for (new, &old) in items.iter().enumerate() {
        item_map[old] = Some(new);
    }
    let mut user_map = vec![None; d.num_users()];
    for (new, &old) in users.iter().enumerate() {
        user_map[old] = Some(new);
    }
    let kept: Vec<Interaction> = d
        .interactions()
        .iter()
        .filter_map(|x| {
            let user = user_map[x.user]?;
            let item = item_map[x.item]?;
            Some(Interaction { user, item, ..*x })
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyFilter(format!(
            "no interactions left with item fraction {item_frac} and user fraction {user_frac}"
        )));
    }
    let options = items.iter().map(|&i| d.option_count(i)).collect();
    let scores = d
        .scores()
        .map(|s| s.iter().filter_map(|(&u, &v)| user_map.get(u).copied().flatten().map(|nu| (nu, v))).collect());
    Dataset::new(users.len(), items.len(), options, kept, scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitUnit {
    ByInteraction,
    ByUser,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub unit: SplitUnit,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, unit: SplitUnit, seed: u64) -> Result<Self> {
        let s = SplitSpec { train_frac: train, val_frac: val, test_frac: test, unit, seed };
        s.validate()?;
        Ok(s)
    }

    /// Training fraction must be positive; validation and test may be
    /// empty, which is how a plain train/test user split is expressed.
    pub fn validate(&self) -> Result<()> {
        let ok = self.train_frac > 0.0
            && self.train_frac <= 1.0
            && (0.0..1.0).contains(&self.val_frac)
            && (0.0..1.0).contains(&self.test_frac)
            && (self.train_frac + self.val_frac + self.test_frac - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "split fractions ({}, {}, {}) must be non-negative, have positive train, and sum to 1",
                self.train_frac, self.val_frac, self.test_frac
            )))
        }
    }

    fn counts(&self, total: usize) -> (usize, usize, usize) {
        let val = (self.val_frac * total as f64).round() as usize;
        let test = (self.test_frac * total as f64).round() as usize;
        let (mut val, mut test) = (val.min(total), test.min(total));
        while val + test >= total && total > 0 {
            // keep at least one training record
            if test >= val && test > 0 {
                test -= 1;
            } else if val > 0 {
                val -= 1;
            } else {
                break;
            }
        }
        (total - val - test, val, test)
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_frac: 0.8, val_frac: 0.1, test_frac: 0.1, unit: SplitUnit::ByInteraction, seed: 0 }
    }
}

/// Three disjoint views over one index space.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Partitions a dataset. `ByInteraction` splits each user's records
/// separately so every user with at least one record keeps one in train;
/// a user with a single record always trains on it. `ByUser` assigns whole
/// users.
pub fn split_dataset(d: &Dataset, s: &SplitSpec) -> Result<DatasetSplit> {
    s.validate()?;
    let mut r = rng::substream(s.seed, "split");
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    match s.unit {
        SplitUnit::ByInteraction => {
            let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); d.num_users()];
            for (k, x) in d.interactions().iter().enumerate() {
                per_user[x.user].push(k);
            }
            for mut idx in per_user {
                idx.shuffle(&mut r);
                let (ntr, nva, _) = s.counts(idx.len());
                for (pos, &k) in idx.iter().enumerate() {
                    let target = if pos < ntr {
                        &mut train
                    } else if pos < ntr + nva {
                        &mut val
                    } else {
                        &mut test
                    };
                    target.push(k);
                }
            }
        }
        SplitUnit::ByUser => {
            let (tr_users, va_users, _) = split_users(d.num_users(), s)?;
            let mut part = vec![2u8; d.num_users()];
            for u in tr_users {
                part[u] = 0;
            }
            for u in va_users {
                part[u] = 1;
            }
            for (k, x) in d.interactions().iter().enumerate() {
                match part[x.user] {
                    0 => train.push(k),
                    1 => val.push(k),
                    _ => test.push(k),
                }
            }
        }
    }
    let view = |mut idx: Vec<usize>| {
        idx.sort_unstable();
        d.with_interactions(idx.into_iter().map(|k| d.interactions()[k]).collect())
    };
    Ok(DatasetSplit { train: view(train), val: view(val), test: view(test) })
}

/// Shuffles user ids `0..num_users` and cuts them into train, validation
/// and test groups, each returned sorted.
pub fn split_users(num_users: usize, s: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    split_ids((0..num_users).collect(), s)
}

/// Same as [`split_users`] over an explicit id list.
pub fn split_ids(mut ids: Vec<usize>, s: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    s.validate()?;
    let mut r = rng::substream(s.seed, "split-users");
    ids.sort_unstable();
    ids.shuffle(&mut r);
    let (ntr, nva, _) = s.counts(ids.len());
    let mut train = ids[..ntr].to_vec();
    let mut val = ids[ntr..ntr + nva].to_vec();
    let mut test = ids[ntr + nva..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn dense(n: usize, m: usize, j: usize) -> Dataset {
        let mut xs = Vec::new();
        for u in 0..n {
            for i in 0..m {
                xs.push(Interaction::new(u, i, (u + i) % j, i % j));
            }
        }
        Dataset::new(n, m, vec![j; m], xs, None).unwrap()
    }

    #[test]
    fn parses_minimal_file() {
        let d = parse_interactions("user,item,chosen,correct\n0,0,1,1\n".as_bytes()).unwrap();
        assert_eq!(d.num_users(), 1);
        assert_eq!(d.num_items(), 1);
        assert_eq!(d.len(), 1);
        assert!(d.interactions()[0].is_correct());
        assert_eq!(d.option_count(0), 2);
    }

    #[test]
    fn bad_field_reports_line() {
        let err = parse_interactions("user,item,chosen,correct\n0,0,abc,1\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crlf_and_directives() {
        let text = "#options 0 5\r\nuser,item,chosen,correct,position\r\n0,0,1,3,7\r\n1,0,3,3,2\r\n";
        let d = parse_interactions(text.as_bytes()).unwrap();
        assert_eq!(d.options_per_item(), &[5]);
        assert_eq!(d.interactions()[0].position, Some(7));
    }

    #[test]
    fn invariant_violation_is_validation_error() {
        let text = "user,item,chosen,correct\n0,0,1,1\n0,0,0,1\n";
        assert!(matches!(parse_interactions(text.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn write_then_parse_preserves_dataset() {
        let d = Dataset::new(3, 2, vec![4, 3], vec![Interaction::new(0, 1, 2, 0), Interaction::new(2, 0, 1, 1)], None)
            .unwrap();
        let mut buf = Vec::new();
        write_interactions(&d, &mut buf).unwrap();
        assert_eq!(parse_interactions(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn scores_parse() {
        let s = parse_scores("user,score\n0,512.5\n3,600\n".as_bytes()).unwrap();
        assert_eq!(s[&0], 512.5);
        assert_eq!(s[&3], 600.0);
        assert!(parse_scores("user,score\n0,x\n".as_bytes()).is_err());
    }

    #[test]
    fn mask_zero_is_identity() {
        let d = dense(5, 4, 3);
        assert_eq!(apply_sparsity_mask(&d, 0.0, 1).unwrap(), d);
    }

    #[test]
    fn mask_keeps_exact_count() {
        let d = dense(10, 10, 4);
        let m = apply_sparsity_mask(&d, 0.3, 5).unwrap();
        assert_eq!(m.len(), 70);
        let m2 = apply_sparsity_mask(&d, 0.3, 5).unwrap();
        assert_eq!(m, m2);
        assert!(apply_sparsity_mask(&d, 1.0, 5).is_err());
        assert!(apply_sparsity_mask(&d, -0.1, 5).is_err());
    }

    #[test]
    fn enem_ablation_grid() {
        let d = dense(20, 10, 4);
        for k in 0..8 {
            let ratio = k as f64 / 10.0;
            let m = apply_sparsity_mask(&d, ratio, 3).unwrap();
            assert_eq!(m.len(), ((1.0 - ratio) * 200.0).round() as usize);
            assert!((m.sparsity() - ratio).abs() < 1e-9);
        }
    }

    #[test]
    fn top_n_keeps_most_answered_item() {
        // item 2 answered by three users, items 0 and 1 by one each
        let xs = vec![
            Interaction::new(0, 0, 0, 0),
            Interaction::new(1, 1, 0, 0),
            Interaction::new(0, 2, 1, 0),
            Interaction::new(1, 2, 0, 0),
            Interaction::new(2, 2, 0, 0),
        ];
        let d = Dataset::new(3, 3, vec![2, 2, 3], xs, None).unwrap();
        let f = top_n_filter(&d, 1.0 / 3.0, 1.0).unwrap();
        assert_eq!(f.num_items(), 1);
        assert_eq!(f.options_per_item(), &[3]);
        assert_eq!(f.len(), 3);
        assert!(f.interactions().iter().all(|x| x.item == 0));
    }

    #[test]
    fn top_n_full_fractions_keep_everything() {
        let d = dense(4, 3, 2);
        assert_eq!(top_n_filter(&d, 1.0, 1.0).unwrap(), d);
    }

    #[test]
    fn top_n_empty_is_error() {
        let xs = vec![Interaction::new(0, 1, 0, 0), Interaction::new(1, 0, 0, 0)];
        let d = Dataset::new(2, 2, vec![2, 2], xs, None).unwrap();
        // user 0 and item 0 survive the tie-break, but they never met
        assert!(matches!(top_n_filter(&d, 0.5, 0.5), Err(Error::EmptyFilter(_))));
    }

    #[test]
    fn per_user_stratification_counts() {
        let d = dense(6, 10, 4);
        let s = SplitSpec::new(0.8, 0.1, 0.1, SplitUnit::ByInteraction, 42).unwrap();
        let split = split_dataset(&d, &s).unwrap();
        for u in 0..6 {
            let count = |p: &Dataset| p.interactions().iter().filter(|x| x.user == u).count();
            assert_eq!((count(&split.train), count(&split.val), count(&split.test)), (8, 1, 1));
        }
    }

    #[test]
    fn tiny_holdout_fractions_keep_everything_in_train() {
        let d = dense(3, 4, 2);
        let eps = 1e-6;
        let s = SplitSpec::new(1.0 - eps, eps / 2.0, eps / 2.0, SplitUnit::ByInteraction, 1).unwrap();
        let split = split_dataset(&d, &s).unwrap();
        assert_eq!(split.train.len(), 12);
    }

    #[test]
    fn single_interaction_user_trains() {
        let d = Dataset::new(1, 2, vec![2, 2], vec![Interaction::new(0, 1, 0, 0)], None).unwrap();
        let s = SplitSpec::new(0.4, 0.3, 0.3, SplitUnit::ByInteraction, 9).unwrap();
        let split = split_dataset(&d, &s).unwrap();
        assert_eq!(split.train.len(), 1);
    }

    #[test]
    fn by_user_eighty_twenty() {
        let s = SplitSpec::new(0.8, 0.0, 0.2, SplitUnit::ByUser, 3).unwrap();
        let (tr, va, te) = split_users(10, &s).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 0, 2));
        let all: HashSet<usize> = tr.iter().chain(&te).copied().collect();
        assert_eq!(all.len(), 10);
        let d = dense(10, 3, 2);
        let split = split_dataset(&d, &s).unwrap();
        assert_eq!(split.train.len(), 24);
        assert_eq!(split.test.len(), 6);
    }

    #[test]
    fn split_spec_rejects_bad_fractions() {
        assert!(SplitSpec::new(0.5, 0.2, 0.2, SplitUnit::ByUser, 0).is_err());
        assert!(SplitSpec::new(0.0, 0.5, 0.5, SplitUnit::ByUser, 0).is_err());
    }
}
