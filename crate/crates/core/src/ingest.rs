//! Fakeddit-style TSV ingestion: posts table, comments join, all-modalities
//! filtering, and split materialization.
//!
//! Parsing never touches the network. Image references are resolved against
//! a local cache directory of files named `<id>.<ext>`; a separate staging
//! step fills that cache beforehand.

use crate::data_model::{
    MetadataSchema, PostingRecord, RasterImage, Split,
};
use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

/// One parsed posts row. Metadata is ordered per the schema used at parse
/// time.
#[derive(Debug, Clone)]
pub struct PostRow {
    pub id: String,
    pub clean_title: String,
    pub image_ref: String,
    pub metadata: Vec<f64>,
    pub label: u8,
    pub split: Split,
}

/// Parsed posts file: accepted rows plus rejected lines with their 1-based
/// line numbers and a reason. Rejects are data, not errors.
#[derive(Debug, Default)]
pub struct PostsTable {
    pub rows: Vec<PostRow>,
    pub rejects: Vec<(usize, String)>,
}

/// One comment row; `submission_id` may repeat.
#[derive(Debug, Clone)]
pub struct CommentRow {
    pub submission_id: String,
    pub body: String,
    pub score: Option<f64>,
}

#[derive(Debug, Default)]
pub struct CommentsTable {
    pub rows: Vec<CommentRow>,
    pub rejects: Vec<(usize, String)>,
}

/// Materialized splits, disjoint by id.
#[derive(Debug, Default)]
pub struct DatasetSplits {
    pub train: Vec<PostingRecord>,
    pub validation: Vec<PostingRecord>,
    pub test: Vec<PostingRecord>,
}

impl DatasetSplits {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    pub fn get(&self, split: Split) -> &[PostingRecord] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

fn header_index(header: &str, required: &[&str]) -> Result<HashMap<String, usize>> {
    let map: HashMap<String, usize> = header
        .trim_end_matches(['\r', '\n'])
        .split('\t')
        .enumerate()
        .map(|(i, name)| (name.to_string(), i))
        .collect();
    for col in required {
        if !map.contains_key(*col) {
            return Err(Error::MissingColumn((*col).to_string()));
        }
    }
    Ok(map)
}

/// Parse a posts TSV. Required columns: `id`, `clean_title`, `image_url`,
/// `2_way_label`, plus one column per schema feature. A `split` column is
/// used when present, otherwise `default_split` applies; a row with neither
/// is rejected.
pub fn parse_posts(
    reader: impl BufRead,
    schema: &MetadataSchema,
    default_split: Option<Split>,
) -> Result<PostsTable> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::EmptyCorpus("posts file has no header".into()))??;
    let mut required = vec!["id", "clean_title", "image_url", "2_way_label"];
    let feature_names: Vec<String> = schema.feature_names().map(str::to_string).collect();
    for name in &feature_names {
        required.push(name);
    }
    let cols = header_index(&header, &required)?;
    let ncols = cols.len();
    let split_col = cols.get("split").copied();

    let mut table = PostsTable::default();
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2; // 1-based, after header
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if fields.len() != ncols {
            table.rejects.push((lineno, format!("expected {ncols} fields, got {}", fields.len())));
            continue;
        }
        let get = |name: &str| fields[cols[name]];
        let label = match get("2_way_label").parse::<u8>() {
            Ok(l) if l <= 1 => l,
            _ => {
                table.rejects.push((lineno, "label not binary".into()));
                continue;
            }
        };
        let split = match split_col {
            Some(i) => match Split::parse(fields[i]) {
                Some(s) => s,
                None => {
                    table.rejects.push((lineno, format!("unknown split tag `{}`", fields[i])));
                    continue;
                }
            },
            None => match default_split {
                Some(s) => s,
                None => {
                    table.rejects.push((lineno, "no split column and no default split".into()));
                    continue;
                }
            },
        };
        let mut metadata = Vec::with_capacity(feature_names.len());
        let mut bad = None;
        for name in &feature_names {
            match get(name).parse::<f64>() {
                Ok(v) => metadata.push(v),
                Err(_) => {
                    bad = Some(name.clone());
                    break;
                }
            }
        }
        if let Some(name) = bad {
            table.rejects.push((lineno, format!("unparsable metadata field `{name}`")));
            continue;
        }
        table.rows.push(PostRow {
            id: get("id").to_string(),
            clean_title: get("clean_title").to_string(),
            image_ref: get("image_url").to_string(),
            metadata,
            label,
            split,
        });
    }
    Ok(table)
}

/// Parse a comments TSV. Required columns: `submission_id`, `body`; a
/// `score` column is kept when present.
pub fn parse_comments(reader: impl BufRead) -> Result<CommentsTable> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::EmptyCorpus("comments file has no header".into()))??;
    let cols = header_index(&header, &["submission_id", "body"])?;
    let ncols = cols.len();
    let score_col = cols.get("score").copied();

    let mut table = CommentsTable::default();
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if fields.len() != ncols {
            table.rejects.push((lineno, format!("expected {ncols} fields, got {}", fields.len())));
            continue;
        }
        table.rows.push(CommentRow {
            submission_id: fields[cols["submission_id"]].to_string(),
            body: fields[cols["body"]].to_string(),
            score: score_col.and_then(|i| fields[i].parse().ok()),
        });
    }
    Ok(table)
}

/// Join comments onto posts: all comment bodies of a post concatenated in
/// source-file order, single-space separated. Posts without comments map to
/// the empty string.
pub fn attach_comments(posts: &PostsTable, comments: &CommentsTable) -> HashMap<String, String> {
    let mut out: HashMap<String, String> =
        posts.rows.iter().map(|r| (r.id.clone(), String::new())).collect();
    for comment in &comments.rows {
        if let Some(text) = out.get_mut(&comment.submission_id) {
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(&comment.body);
        }
    }
    out
}

/// Look up a cached image `<id>.<ext>` and decode it to RGB. Missing or
/// undecodable files yield `None`; the caller counts that as a missing
/// modality.
pub fn load_cached_image(cache_dir: &Path, id: &str) -> Option<RasterImage> {
    for ext in ["png", "jpg", "jpeg"] {
        let path = cache_dir.join(format!("{id}.{ext}"));
        if path.exists() {
            let img = image::open(&path).ok()?.into_rgb8();
            let (w, h) = img.dimensions();
            return Some(RasterImage::new(h as usize, w as usize, img.into_raw()));
        }
    }
    None
}

/// Stage local image files into the cache under their post id, keeping the
/// source extension. Remote URLs are not fetched here; a reference that is
/// not a readable local file is skipped and later counted as missing.
pub fn stage_local_images(entries: &[(String, String)], cache_dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(cache_dir)?;
    let mut staged = 0;
    for (id, reference) in entries {
        let src = Path::new(reference);
        if !src.is_file() {
            continue;
        }
        let ext = src.extension().and_then(|e| e.to_str()).unwrap_or("png");
        let dst = cache_dir.join(format!("{id}.{ext}"));
        if !dst.exists() {
            std::fs::copy(src, &dst)?;
        }
        staged += 1;
    }
    Ok(staged)
}

/// Assemble posting records from parsed rows, the comments join, and the
/// image cache. Records may still miss modalities; `filter_complete`
/// enforces the all-modalities contract.
pub fn build_records(
    posts: &PostsTable,
    comments: &HashMap<String, String>,
    cache_dir: &Path,
) -> Vec<PostingRecord> {
    posts
        .rows
        .iter()
        .map(|row| PostingRecord {
            id: row.id.clone(),
            title_text: row.clean_title.clone(),
            comments_text: comments.get(&row.id).cloned().unwrap_or_default(),
            image: load_cached_image(cache_dir, &row.id)
                .unwrap_or(RasterImage { height: 0, width: 0, pixels: Vec::new() }),
            metadata: row.metadata.clone(),
            label: row.label,
            split: row.split,
        })
        .collect()
}

/// Keep exactly the records with all four modalities present, preserving
/// order, and count removals by the first missing modality (checked in the
/// order title, comments, image, metadata).
pub fn filter_complete(
    records: Vec<PostingRecord>,
    schema: &MetadataSchema,
) -> (Vec<PostingRecord>, BTreeMap<&'static str, usize>) {
    let mut kept = Vec::with_capacity(records.len());
    let mut reasons: BTreeMap<&'static str, usize> = BTreeMap::new();
    for record in records {
        let missing = if record.title_text.trim().is_empty() {
            Some("title")
        } else if record.comments_text.trim().is_empty() {
            Some("comments")
        } else if record.image.is_empty() {
            Some("image")
        } else if record.metadata.len() != schema.len()
            || record.metadata.iter().any(|v| !v.is_finite())
        {
            Some("metadata")
        } else {
            None
        };
        match missing {
            Some(reason) => *reasons.entry(reason).or_insert(0) += 1,
            None => kept.push(record),
        }
    }
    (kept, reasons)
}

/// Partition records by external split tags. Tag count must match, tags
/// must parse, and no id may land in more than one split.
pub fn split_dataset(records: Vec<PostingRecord>, tags: &[String]) -> Result<DatasetSplits> {
    if records.len() != tags.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} records but {} split tags",
            records.len(),
            tags.len()
        )));
    }
    let mut tagged = Vec::with_capacity(records.len());
    for (mut record, tag) in records.into_iter().zip(tags) {
        record.split = Split::parse(tag).ok_or_else(|| Error::UnknownSplit(tag.clone()))?;
        tagged.push(record);
    }
    split_by_record_tag(tagged)
}

/// Partition records by their own split field, verifying id disjointness.
pub fn split_by_record_tag(records: Vec<PostingRecord>) -> Result<DatasetSplits> {
    let mut seen: HashMap<String, Split> = HashMap::new();
    let mut splits = DatasetSplits::default();
    for record in records {
        match seen.get(&record.id) {
            Some(prev) if *prev != record.split => {
                return Err(Error::DuplicateAcrossSplits(record.id));
            }
            _ => {
                seen.insert(record.id.clone(), record.split);
            }
        }
        match record.split {
            Split::Train => splits.train.push(record),
            Split::Validation => splits.validation.push(record),
            Split::Test => splits.test.push(record),
        }
    }
    let mut ids = HashSet::new();
    for record in splits.train.iter().chain(&splits.validation).chain(&splits.test) {
        ids.insert(&record.id);
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::MetadataSchema;
    use std::io::Cursor;

    const HEADER: &str = "id\tclean_title\timage_url\t2_way_label\tupvote_ratio\tscore\tnum_comments\tsplit";

    fn posts_text(lines: &[&str]) -> String {
        let mut s = HEADER.to_string();
        for l in lines {
            s.push('\n');
            s.push_str(l);
        }
        s
    }

    #[test]
    fn parse_two_rows() {
        let text = posts_text(&[
            "p1\thello world\tp1.png\t0\t0.9\t10\t3\ttrain",
            "p2\tother title\tp2.png\t1\t0.4\t-2\t0\ttest",
        ]);
        let schema = MetadataSchema::fakeddit_default();
        let table = parse_posts(Cursor::new(text), &schema, None).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table.rejects.is_empty());
        assert_eq!(table.rows[0].metadata, vec![0.9, 10.0, 3.0]);
        assert_eq!(table.rows[1].split, Split::Test);
    }

    #[test]
    fn wrong_field_count_rejected_with_line_number() {
        let text = posts_text(&["p1\thello\tp1.png\t0\t0.9\t10\t3\ttrain", "p2\tbroken"]);
        let schema = MetadataSchema::fakeddit_default();
        let table = parse_posts(Cursor::new(text), &schema, None).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rejects.len(), 1);
        assert_eq!(table.rejects[0].0, 3);
    }

    #[test]
    fn header_only_is_empty_table() {
        let schema = MetadataSchema::fakeddit_default();
        let table = parse_posts(Cursor::new(HEADER.to_string()), &schema, None).unwrap();
        assert!(table.rows.is_empty());
        assert!(table.rejects.is_empty());
    }

    #[test]
    fn missing_mandatory_column_is_hard_error() {
        let schema = MetadataSchema::fakeddit_default();
        let err = parse_posts(Cursor::new("id\tclean_title\n"), &schema, None).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "image_url"));
    }

    fn table_for(ids: &[&str]) -> PostsTable {
        PostsTable {
            rows: ids
                .iter()
                .map(|id| PostRow {
                    id: id.to_string(),
                    clean_title: "t".into(),
                    image_ref: String::new(),
                    metadata: vec![],
                    label: 0,
                    split: Split::Train,
                })
                .collect(),
            rejects: vec![],
        }
    }

    #[test]
    fn attach_joins_in_source_order() {
        let posts = table_for(&["p1", "p2"]);
        let comments = CommentsTable {
            rows: vec![
                CommentRow { submission_id: "p1".into(), body: "c3".into(), score: Some(1.0) },
                CommentRow { submission_id: "p1".into(), body: "c1".into(), score: Some(9.0) },
                CommentRow { submission_id: "p1".into(), body: "c2".into(), score: Some(5.0) },
            ],
            rejects: vec![],
        };
        let joined = attach_comments(&posts, &comments);
        assert_eq!(joined["p1"], "c3 c1 c2");
        assert_eq!(joined["p2"], "");
    }

    #[test]
    fn attach_simple_pair() {
        let posts = table_for(&["p1"]);
        let comments = CommentsTable {
            rows: vec![
                CommentRow { submission_id: "p1".into(), body: "a".into(), score: None },
                CommentRow { submission_id: "p1".into(), body: "b".into(), score: None },
            ],
            rejects: vec![],
        };
        assert_eq!(attach_comments(&posts, &comments)["p1"], "a b");
    }

    fn record(id: &str, split: Split) -> PostingRecord {
        PostingRecord {
            id: id.into(),
            title_text: "title".into(),
            comments_text: "c".into(),
            image: RasterImage::constant(2, 2, 1),
            metadata: vec![0.5, 1.0, 2.0],
            label: 0,
            split,
        }
    }

    #[test]
    fn filter_removes_incomplete_and_counts_reasons() {
        let schema = MetadataSchema::fakeddit_default();
        let mut text_only = record("p2", Split::Train);
        text_only.image = RasterImage { height: 0, width: 0, pixels: vec![] };
        let records = vec![record("p1", Split::Train), text_only, record("p3", Split::Train)];
        let (kept, reasons) = filter_complete(records, &schema);
        assert_eq!(kept.len(), 2);
        assert_eq!(reasons.get("image"), Some(&1));
        assert_eq!(kept.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), vec!["p1", "p3"]);
    }

    #[test]
    fn filter_is_identity_on_complete_and_idempotent() {
        let schema = MetadataSchema::fakeddit_default();
        let records = vec![record("a", Split::Train), record("b", Split::Test)];
        let (once, reasons) = filter_complete(records.clone(), &schema);
        assert_eq!(once.len(), 2);
        assert!(reasons.is_empty());
        let (twice, reasons2) = filter_complete(once.clone(), &schema);
        assert_eq!(twice.len(), once.len());
        assert!(reasons2.is_empty());
    }

    #[test]
    fn filter_count_conservation() {
        let schema = MetadataSchema::fakeddit_default();
        let mut records = Vec::new();
        for i in 0..10 {
            let mut r = record(&format!("p{i}"), Split::Train);
            match i % 4 {
                1 => r.title_text = String::new(),
                2 => r.comments_text = " ".into(),
                _ => {}
            }
            records.push(r);
        }
        let n = records.len();
        let (kept, reasons) = filter_complete(records, &schema);
        assert_eq!(n, kept.len() + reasons.values().sum::<usize>());
    }

    #[test]
    fn split_by_tags() {
        let records =
            vec![record("a", Split::Train), record("b", Split::Train), record("c", Split::Train)];
        let tags = vec!["train".to_string(), "test".to_string(), "train".to_string()];
        let splits = split_dataset(records, &tags).unwrap();
        assert_eq!(splits.sizes(), (2, 0, 1));
    }

    #[test]
    fn unknown_tag_is_hard_error() {
        let records = vec![record("a", Split::Train)];
        let err = split_dataset(records, &["holdout".to_string()]).unwrap_err();
        assert!(matches!(err, Error::UnknownSplit(t) if t == "holdout"));
    }

    #[test]
    fn duplicate_id_across_splits_is_error() {
        let records = vec![record("a", Split::Train), record("a", Split::Test)];
        let err = split_by_record_tag(records).unwrap_err();
        assert!(matches!(err, Error::DuplicateAcrossSplits(id) if id == "a"));
    }

    #[test]
    fn empty_input_gives_three_empty_splits() {
        let splits = split_dataset(vec![], &[]).unwrap();
        assert_eq!(splits.sizes(), (0, 0, 0));
    }
}
