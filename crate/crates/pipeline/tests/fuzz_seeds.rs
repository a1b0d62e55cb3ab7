//! Runs every parser over the checked-in fuzz corpus so that the seeds stay
//! meaningful as formats change.

use std::collections::HashMap;
use std::path::PathBuf;

use vispromo::rundir::Manifest;
use vispromo::RunConfig;
use vispromo_core::dataset::{parse_interactions, Catalog, RawInteraction, Split};
use vispromo_core::image::Image;
use vispromo_core::visual::cluster::ClusterModel;
use vispromo_nn::blob;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn ok_names(target: &str, parses: impl Fn(&[u8]) -> bool) -> Vec<String> {
    seeds(target).into_iter().filter(|(_, b)| parses(b)).map(|(n, _)| n).collect()
}

#[test]
fn interactions() {
    let ok = ok_names("interactions", |b| parse_interactions(b).is_ok());
    assert_eq!(ok, ["amazon_style.csv", "header_only.csv", "synthetic_head.csv"]);
}

#[test]
fn split_json() {
    let mut raw = Vec::new();
    for u in 0..3 {
        for i in 0..5 {
            raw.push(RawInteraction { user: format!("u{u}"), item: format!("i{i}"), rating: 1.0, timestamp: i });
        }
    }
    let images: HashMap<String, Image> = (0..5).map(|i| (format!("i{i}"), Image::filled(8, 0.5))).collect();
    let catalog = Catalog::build(raw, images).unwrap();
    let ok = ok_names("split_json", |b| Split::from_json(std::str::from_utf8(b).unwrap(), &catalog).is_ok());
    assert_eq!(ok, ["valid.json"]);
}

#[test]
fn blobs_and_clusters() {
    assert!(seeds("blob_decode").iter().all(|(_, b)| blob::decode(b).is_ok()));
    let ids: Vec<String> = (0..200).map(|i| format!("i{i:05}")).collect();
    for (name, b) in seeds("cluster_files") {
        let cut = b.iter().position(|&x| x == 0).unwrap();
        let json = std::str::from_utf8(&b[..cut]).unwrap();
        assert!(ClusterModel::from_files(json, &b[cut + 1..], &ids).is_ok(), "{name}");
    }
}

#[test]
fn configs_and_manifests() {
    let ok = ok_names("run_config", |b| RunConfig::from_toml_str(std::str::from_utf8(b).unwrap()).is_ok());
    assert_eq!(ok, ["default.toml", "files.toml", "small.toml"]);
    let ok = ok_names("run_manifest", |b| Manifest::from_json(std::str::from_utf8(b).unwrap()).is_ok());
    assert_eq!(ok, ["full_run.json"]);
}

#[test]
fn images() {
    for (name, b) in seeds("image_decode") {
        assert_eq!(Image::decode(&b, 8).unwrap().side(), 8, "{name}");
    }
}
