use std::fs;
use std::io::Read;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use md5::{Digest, Md5};
use symclone_core::data::load_mnist_idx;

use crate::output::OutputDir;
use crate::Outcome;

const MIRRORS: [&str; 2] = ["https://ossci-datasets.s3.amazonaws.com/mnist/", "http://yann.lecun.com/exdb/mnist/"];

/// The four canonical files with their published MD5 sums.
const FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
    ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
    ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
];

#[derive(Args, Debug)]
pub struct FetchArgs {
    /// Destination directory.
    #[arg(long, default_value = "data/mnist")]
    dir: PathBuf,
    /// Base URL to try before the built-in mirrors (repeatable).
    #[arg(long)]
    mirror: Vec<String>,
}

fn md5_hex(bytes: &[u8]) -> String {
    Md5::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn download(url: &str) -> Result<Vec<u8>> {
    let resp = ureq::get(url).call().with_context(|| format!("GET {url}"))?;
    let mut bytes = Vec::new();
    resp.into_body().into_reader().read_to_end(&mut bytes).with_context(|| format!("reading {url}"))?;
    Ok(bytes)
}

pub fn run(args: FetchArgs) -> Result<Outcome> {
    let mut out = OutputDir::create(&args.dir)?;
    let mirrors: Vec<&str> = args.mirror.iter().map(String::as_str).chain(MIRRORS).collect();
    for (name, md5) in FILES {
        let path = out.file(name)?;
        if fs::read(&path).is_ok_and(|b| md5_hex(&b) == md5) {
            println!("{name}: present, checksum ok");
            continue;
        }
        let mut failures = Vec::new();
        let mut fetched = None;
        for base in &mirrors {
            let url = format!("{}/{name}", base.trim_end_matches('/'));
            match download(&url) {
                Ok(b) if md5_hex(&b) == md5 => {
                    fetched = Some(b);
                    break;
                }
                Ok(b) => failures.push(format!("{url}: checksum {} != {md5}", md5_hex(&b))),
                Err(e) => failures.push(format!("{e:#}")),
            }
        }
        let Some(bytes) = fetched else {
            bail!("could not fetch {name}:\n  {}", failures.join("\n  "));
        };
        fs::write(&path, &bytes).with_context(|| format!("cannot write {}", path.display()))?;
        println!("{name}: {} bytes, checksum ok", bytes.len());
    }
    for split in ["train", "t10k"] {
        let images = args.dir.join(format!("{split}-images-idx3-ubyte.gz"));
        let labels = args.dir.join(format!("{split}-labels-idx1-ubyte.gz"));
        let ds = load_mnist_idx(&images, &labels)?;
        println!("{split}: {} digits of {:?}", ds.len(), ds.image_size());
    }
    // The manifest carries the SHA-256 of every file.
    out.finish("fetch-data")?;
    Ok(Outcome::Done)
}
