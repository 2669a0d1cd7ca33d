//! Masks and counts strings produced once by pycocotools
//! (`fixtures/gen_rle_fixtures.py`), checked in both directions.

use hedgeval::mask::{compress, decode, decompress, encode, BinaryMask, RleMask};
use serde::Deserialize;

#[derive(Deserialize)]
struct Fixture {
    name: String,
    height: u32,
    width: u32,
    rows: Vec<String>,
    counts_string: String,
    counts: Vec<u32>,
    area: u64,
}

fn fixtures() -> Vec<Fixture> {
    let text = include_str!("fixtures/rle_fixtures.json");
    serde_json::from_str(text).expect("fixture file parses")
}

fn pixels(f: &Fixture) -> BinaryMask {
    let rows: Vec<&str> = f.rows.iter().map(String::as_str).collect();
    let m = BinaryMask::from_rows(&rows).unwrap();
    assert_eq!(m.dims(), (f.height, f.width), "{}", f.name);
    m
}

#[test]
fn at_least_five_fixtures() {
    assert!(fixtures().len() >= 5);
}

#[test]
fn decoding_reference_strings_is_pixel_exact() {
    for f in fixtures() {
        let rle = decompress(&f.counts_string, f.height, f.width).unwrap();
        assert_eq!(rle.counts(), f.counts.as_slice(), "{}", f.name);
        let m = decode(&rle);
        assert_eq!(m, pixels(&f), "{}", f.name);
        assert_eq!(m.area(), f.area, "{}", f.name);
    }
}

#[test]
fn encoding_reproduces_reference_strings() {
    for f in fixtures() {
        let rle = encode(&pixels(&f));
        assert_eq!(rle.counts(), f.counts.as_slice(), "{}", f.name);
        assert_eq!(compress(&rle), f.counts_string, "{}", f.name);
        let raw = RleMask::new(f.height, f.width, f.counts.clone()).unwrap();
        assert_eq!(compress(&raw), f.counts_string, "{}", f.name);
    }
}
