//! Synthetic harvest fixtures shared by the integration tests.
//!
//! Every (class, query) pair gets its own colour theme and noise level, so
//! expansions differ measurably in distance and dispersion. Engines return
//! overlapping windows of one per-query image list, giving per-query
//! duplicates, and expansion `j` starts with `(j mod 7) · 3` images copied
//! from its class's base list, giving cross-expansion duplicates.

#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use webharvest::acquisition::fixture_file;
use webharvest::core::rng::{fnv1a64, SampleRng};

pub const CLASS_NAMES: [&str; 10] = [
    "siberian husky",
    "grey whale",
    "desk",
    "vending machine",
    "acoustic guitar",
    "lighthouse",
    "teapot",
    "red fox",
    "school bus",
    "sunflower",
];

pub const KEYWORDS: [&str; 20] = [
    "office",
    "top",
    "table",
    "work",
    "business",
    "background",
    "white",
    "view",
    "blank",
    "empty",
    "above",
    "space",
    "computer",
    "paper",
    "workplace",
    "wooden",
    "coffee",
    "phone",
    "notebook",
    "design",
];

pub struct FixtureSpec {
    pub classes: usize,
    pub keywords: usize,
    pub engines: Vec<&'static str>,
    /// Results each engine returns per query.
    pub per_engine: usize,
    /// Offset between consecutive engines' windows into a query's list.
    pub engine_offset: usize,
    pub side: u32,
    pub target_count: usize,
    pub strategy: &'static str,
}

impl FixtureSpec {
    /// 10 classes, 20 keywords, 3 engines × 200 results.
    pub fn full() -> Self {
        FixtureSpec {
            classes: 10,
            keywords: 20,
            engines: vec!["google", "yahoo", "bing"],
            per_engine: 200,
            engine_offset: 30,
            side: 16,
            target_count: 600,
            strategy: "filtered",
        }
    }

    pub fn small() -> Self {
        FixtureSpec {
            classes: 2,
            keywords: 20,
            engines: vec!["google", "bing"],
            per_engine: 12,
            engine_offset: 4,
            side: 16,
            target_count: 40,
            strategy: "filtered",
        }
    }

    fn distinct_per_query(&self) -> usize {
        self.per_engine + self.engine_offset * (self.engines.len() - 1)
    }
}

pub fn class_id(c: usize) -> String {
    format!("n{:08}", 1000 + c)
}

/// A PNG of `side`² pixels around a theme colour.
fn png(side: u32, theme: [f64; 3], amplitude: f64, seed: u64) -> Vec<u8> {
    let mut rng = SampleRng::new(seed);
    let img = image::RgbImage::from_fn(side, side, |_, _| {
        let mut px = [0u8; 3];
        for (ch, t) in px.iter_mut().zip(theme) {
            let noise = (rng.next_u64() % 1001) as f64 / 1000.0 * 2.0 - 1.0;
            *ch = (t + amplitude * noise).clamp(0.0, 255.0) as u8;
        }
        image::Rgb(px)
    });
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .unwrap();
    out
}

fn theme(seed: u64) -> [f64; 3] {
    let mut rng = SampleRng::new(seed);
    [0, 1, 2].map(|_| 40.0 + (rng.next_u64() % 176) as f64)
}

/// Writes images, fixtures, class list and `pipeline.toml` under `dir`;
/// returns the config path.
pub fn build(dir: &Path, spec: &FixtureSpec) -> PathBuf {
    let images = dir.join("images");
    let fixtures = dir.join("fixtures");
    let n = spec.distinct_per_query();
    let mut classes_tsv = String::from("# class_id\tname\n");
    for c in 0..spec.classes {
        let name = CLASS_NAMES[c];
        let id = class_id(c);
        writeln!(classes_tsv, "{id}\t{name}").unwrap();
        let class_dir = images.join(&id);
        fs::create_dir_all(&class_dir).unwrap();

        let kw_path = fixture_file(&fixtures, "keywords", name);
        fs::create_dir_all(kw_path.parent().unwrap()).unwrap();
        let kws: Vec<&str> = KEYWORDS.iter().copied().take(spec.keywords).collect();
        fs::write(&kw_path, kws.join("\n") + "\n").unwrap();

        let class_theme = theme(fnv1a64(name.as_bytes()));
        let mut base_files: Vec<PathBuf> = Vec::new();
        for q in 0..=kws.len() {
            let (query, q_theme, amplitude) = if q == 0 {
                (name.to_string(), class_theme, 25.0)
            } else {
                let t = theme(fnv1a64(format!("{name}/{}", kws[q - 1]).as_bytes()));
                // expansions drift away from the class theme by varying amounts
                let w = (q % 5) as f64 / 5.0;
                let mixed = [0, 1, 2].map(|i| class_theme[i] * (1.0 - w) + t[i] * w);
                (
                    format!("{name} {}", kws[q - 1]),
                    mixed,
                    15.0 + 6.0 * (q % 7) as f64,
                )
            };
            let shared = if q == 0 { 0 } else { ((q % 7) * 3).min(n / 2) };
            let mut files = Vec::with_capacity(n);
            for i in 0..n {
                if i < shared {
                    files.push(base_files[(q * 11 + i) % base_files.len()].clone());
                    continue;
                }
                let path = class_dir.join(format!("q{q:02}-{i:04}.png"));
                let seed = fnv1a64(format!("{id}/{q}/{i}").as_bytes());
                fs::write(&path, png(spec.side, q_theme, amplitude, seed)).unwrap();
                files.push(path);
            }
            for (e, engine) in spec.engines.iter().enumerate() {
                let path = fixture_file(&fixtures, engine, &query);
                fs::create_dir_all(path.parent().unwrap()).unwrap();
                let mut out = fs::File::create(path).unwrap();
                for f in &files[e * spec.engine_offset..e * spec.engine_offset + spec.per_engine] {
                    writeln!(out, "{}", url::Url::from_file_path(f).unwrap()).unwrap();
                }
            }
            if q == 0 {
                base_files = files;
            }
        }
    }
    fs::write(dir.join("classes.tsv"), classes_tsv).unwrap();
    let engines: Vec<String> = spec.engines.iter().map(|e| format!("{e:?}")).collect();
    let config = format!(
        "classes = \"classes.tsv\"\nwork_dir = \"work\"\nmode = \"fixture\"\nfixtures = \"fixtures\"\n\
         engines = [{}]\ntarget_count = {}\nstrategy = \"{}\"\nseed = 7\nworkers = 8\n\n\
         [retry]\ninitial_backoff_ms = 1\n",
        engines.join(", "),
        spec.target_count,
        spec.strategy
    );
    let path = dir.join("pipeline.toml");
    fs::write(&path, config).unwrap();
    path
}
