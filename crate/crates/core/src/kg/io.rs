//! Quadruple TSV reading and writing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Fact, MultiViewKg, Vocab};
use crate::error::{Error, Result};

#[derive(Default)]
struct Interner {
    labels: Vec<String>,
    index: std::collections::HashMap<String, usize>,
}

impl Interner {
    fn intern(&mut self, label: &str) -> usize {
        if let Some(&i) = self.index.get(label) {
            return i;
        }
        let i = self.labels.len();
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), i);
        i
    }
}

/// Parses `head\trelation\ttail\tview` lines. Blank lines and lines
/// starting with `#` are skipped.
///
/// Entity and relation ids follow first-seen order. Views do too, unless
/// every view label parses as an integer, in which case they are ordered
/// numerically.
pub fn ingest_quadruples<R: BufRead>(source: R) -> Result<MultiViewKg> {
    let mut entities = Interner::default();
    let mut relations = Interner::default();
    let mut views = Interner::default();
    let mut raw = Vec::new();

    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        if let Some(pos) = fields.iter().position(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("field {} is empty", pos + 1),
            });
        }
        let h = entities.intern(fields[0]);
        let r = relations.intern(fields[1]);
        let t = entities.intern(fields[2]);
        let v = views.intern(fields[3]);
        raw.push((h, r, t, v));
    }
    if raw.is_empty() {
        return Err(Error::Empty("no quadruples in input".into()));
    }

    let view_order = numeric_view_order(&views.labels);
    let (view_labels, remap) = match view_order {
        Some(order) => {
            let mut remap = vec![0; order.len()];
            for (new, &old) in order.iter().enumerate() {
                remap[old] = new;
            }
            let labels = order.iter().map(|&i| views.labels[i].clone()).collect();
            (labels, remap)
        }
        None => {
            let n = views.labels.len();
            (views.labels, (0..n).collect())
        }
    };

    MultiViewKg::from_parts(
        Vocab::from_labels(entities.labels)?,
        Vocab::from_labels(relations.labels)?,
        Vocab::from_labels(view_labels)?,
        raw.into_iter()
            .map(|(h, r, t, v)| Fact::new(h, r, t, remap[v])),
    )
}

/// Old indices sorted by integer value, when every label is an integer.
fn numeric_view_order(labels: &[String]) -> Option<Vec<usize>> {
    let values: Vec<i64> = labels
        .iter()
        .map(|l| l.trim().parse::<i64>().ok())
        .collect::<Option<_>>()?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| values[a].cmp(&values[b]).then_with(|| labels[a].cmp(&labels[b])));
    Some(order)
}

impl MultiViewKg {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ingest_quadruples(BufReader::new(File::open(path)?))
    }

    pub fn from_tsv_str(text: &str) -> Result<Self> {
        ingest_quadruples(text.as_bytes())
    }

    /// Writes one line per fact, ordered by `(view, head, relation, tail)`.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut facts = self.facts().to_vec();
        facts.sort_by_key(|f| (f.view, f.head, f.relation, f.tail));
        for f in facts {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                self.entities.labels[f.head.0],
                self.relations.labels[f.relation.0],
                self.entities.labels[f.tail.0],
                self.views.labels[f.view.0]
            )?;
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("labels are UTF-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_tsv(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EntityId, ViewId};

    #[test]
    fn minimal_line() {
        let kg = MultiViewKg::from_tsv_str("a\tr\tb\t0\n").unwrap();
        assert_eq!(kg.num_entities(), 2);
        assert_eq!(kg.num_relations(), 1);
        assert_eq!(kg.num_views(), 1);
        assert_eq!(kg.view_set(EntityId(0)), &[ViewId(0)]);
        assert_eq!(kg.view_set(EntityId(1)), &[ViewId(0)]);
    }

    #[test]
    fn repeated_line_is_deduplicated() {
        let once = MultiViewKg::from_tsv_str("a\tr\tb\t0\n").unwrap();
        let twice = MultiViewKg::from_tsv_str("a\tr\tb\t0\na\tr\tb\t0\n").unwrap();
        assert_eq!(once.facts(), twice.facts());
        assert_eq!(once.stats(), twice.stats());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let kg = MultiViewKg::from_tsv_str("# header\n\na\tr\tb\tv\n").unwrap();
        assert_eq!(kg.num_facts(), 1);
    }

    #[test]
    fn wrong_field_count_reports_line() {
        let err = MultiViewKg::from_tsv_str("a\tr\tb\t0\n# c\na\tr\tb\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(matches!(
            MultiViewKg::from_tsv_str("# nothing\n"),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn integer_views_sort_numerically() {
        let kg = MultiViewKg::from_tsv_str("a\tr\tb\t10\nb\tr\tc\t2\nc\tr\ta\t7\n").unwrap();
        let labels: Vec<&str> = kg.views().labels().iter().map(String::as_str).collect();
        assert_eq!(labels, ["2", "7", "10"]);
        assert_eq!(kg.view("10"), Some(ViewId(2)));
    }

    #[test]
    fn textual_views_keep_first_seen_order() {
        let kg = MultiViewKg::from_tsv_str("a\tr\tb\tz\nb\tr\tc\ta\n").unwrap();
        assert_eq!(kg.view("z"), Some(ViewId(0)));
        assert_eq!(kg.view("a"), Some(ViewId(1)));
    }
}
