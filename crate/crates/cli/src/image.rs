// SPDX-License-Identifier: Apache-2.0

//! `image` subcommands. A manifest is JSON naming each page's index,
//! permissions, type and body file:
//!
//! ```json
//! {
//!   "format": "servas-image-manifest",
//!   "version": 1,
//!   "entry_offset": 0,
//!   "developer_id": "d0d0d0d0d0d0d0d0d0d0d0d0d0d0d0d0",
//!   "pages": [
//!     { "index": 0, "perms": "rx", "type": "SHENCLAVE", "file": "page-0.bin" }
//!   ]
//! }
//! ```
//!
//! Body files hold at most one page and are zero-padded. Paths are relative
//! to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Subcommand;
use serde::{Deserialize, Serialize};

use servas_core::crypto::hash256;
use servas_core::machine::{MachineConfig, PAGE_BYTES};
use servas_core::monitor::image::{load_enclave_image, EnclaveImage, ImagePage, LoadedImage};
use servas_core::monitor::{developer_key, Platform};
use servas_core::tweak::{PageType, Perms};

use crate::{write_output, Failure};

pub const MANIFEST_FORMAT: &str = "servas-image-manifest";
pub const MANIFEST_VERSION: u32 = 1;

const LOAD_SPACE: u32 = 1;
const LOAD_BASE: u64 = 0x4000_0000;

#[derive(Subcommand, Debug)]
pub enum ImageCmd {
    /// Build a plain image from a manifest.
    Pack {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a plain image into a manifest and page files.
    Unpack {
        image: PathBuf,
        /// Output directory.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Encrypt a plain image under the developer key of the seeded CPU.
    Wrap {
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Derive the key from this developer id instead of the image's own.
        #[arg(long, value_name = "HEX")]
        developer_id: Option<String>,
    },
    /// Print an image and try to create an enclave from it on the seeded machine.
    Inspect { image: PathBuf },
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    entry_offset: u64,
    developer_id: String,
    pages: Vec<PageEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PageEntry {
    index: u32,
    perms: String,
    #[serde(rename = "type")]
    page_type: String,
    file: String,
}

fn io_err(p: &Path, e: std::io::Error) -> Failure {
    Failure::usage(format!("{}: {e}", p.display()))
}

fn parse_developer_id(s: &str) -> Result<[u8; 16], Failure> {
    let bytes = hex::decode(s).map_err(|e| Failure::usage(format!("developer id: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| Failure::usage("developer id must be 16 bytes of hex"))
}

fn read_image(path: &Path) -> Result<LoadedImage, Failure> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    load_enclave_image(&bytes).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn read_plain(path: &Path) -> Result<EnclaveImage, Failure> {
    match read_image(path)? {
        LoadedImage::Plain(i) => Ok(i),
        LoadedImage::Wrapped(_) => Err(Failure::usage(format!("{} is encrypted", path.display()))),
    }
}

fn pack(manifest_path: &Path) -> Result<EnclaveImage, Failure> {
    let text = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Failure::usage(format!("manifest: {e}")))?;
    if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
        return Err(Failure::usage(format!("manifest: unsupported format {} v{}", m.format, m.version)));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut pages = Vec::with_capacity(m.pages.len());
    for p in &m.pages {
        let perms = Perms::parse(&p.perms).ok_or_else(|| Failure::usage(format!("bad perms {:?}", p.perms)))?;
        let ty = PageType::parse(&p.page_type)
            .ok_or_else(|| Failure::usage(format!("bad page type {:?}", p.page_type)))?;
        let body_path = dir.join(&p.file);
        let body = fs::read(&body_path).map_err(|e| io_err(&body_path, e))?;
        if body.len() as u64 > PAGE_BYTES {
            return Err(Failure::usage(format!("{} is larger than a page", body_path.display())));
        }
        pages.push(ImagePage::new(p.index, perms, ty, &body));
    }
    let img = EnclaveImage {
        entry_offset: m.entry_offset,
        developer_id: parse_developer_id(&m.developer_id)?,
        pages,
    };
    img.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(img)
}

fn perms_text(p: Perms) -> String {
    [(Perms::R, 'r'), (Perms::W, 'w'), (Perms::X, 'x')]
        .iter()
        .filter(|(bit, _)| p.contains(*bit))
        .map(|(_, c)| *c)
        .collect()
}

fn unpack(img: &EnclaveImage, dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut entries = Vec::new();
    for p in &img.pages {
        let file = format!("page-{}.bin", p.index);
        let path = dir.join(&file);
        fs::write(&path, &p.data).map_err(|e| io_err(&path, e))?;
        entries.push(PageEntry {
            index: p.index,
            perms: perms_text(p.perms),
            page_type: p.page_type.name().to_string(),
            file,
        });
    }
    let m = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        entry_offset: img.entry_offset,
        developer_id: hex::encode(img.developer_id),
        pages: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))
}

fn wrap(img: &EnclaveImage, seed: u64, developer_id: Option<&str>) -> Result<Vec<u8>, Failure> {
    let id = match developer_id {
        Some(s) => parse_developer_id(s)?,
        None => img.developer_id,
    };
    let cpu_key = MachineConfig::from_seed(seed).cpu_key;
    let key = developer_key(&cpu_key, &id);
    let plain = img.to_bytes().map_err(|e| Failure::usage(e.to_string()))?;
    let digest = hash256(&[b"servas-image-nonce", &seed.to_le_bytes(), &plain]);
    let nonce: [u8; 16] = digest[..16].try_into().unwrap();
    img.wrap(&key, &nonce).map_err(|e| Failure::usage(e.to_string()))
}

fn inspect(loaded: &LoadedImage, seed: u64) -> Result<(), Failure> {
    let shell = loaded.shell();
    let kind = match loaded {
        LoadedImage::Plain(_) => "plain",
        LoadedImage::Wrapped(_) => "encrypted",
    };
    println!("kind          {kind}");
    println!("developer id  {}", hex::encode(shell.developer_id));
    println!("entry offset  {:#x}", shell.entry_offset);
    println!("pages         {}", shell.pages.len());
    for p in &shell.pages {
        println!("  {:>4}  {:<3}  {}", p.index, perms_text(p.perms), p.page_type.name());
    }
    if let LoadedImage::Plain(img) = loaded {
        let encid = img.encid().map_err(|e| Failure::usage(e.to_string()))?;
        println!("encid         {}", hex::encode(encid));
    }
    let mut p = Platform::from_seed(seed);
    match p.load_enclave(LOAD_SPACE, LOAD_BASE, loaded, 1, 0) {
        Ok(h) => {
            let (meta, _) = p.sm.inspect(&mut p.machine, &h).map_err(|e| Failure::usage(e.to_string()))?;
            println!("ecreate       ok, rtid {:#x}, seed {seed}", meta.rtid);
            Ok(())
        }
        Err(e) => {
            println!("ecreate       failed: {e}, seed {seed}");
            Err(Failure::mismatch(format!("ecreate failed: {e}")))
        }
    }
}

pub fn run(cmd: &ImageCmd, seed: u64) -> Result<(), Failure> {
    match cmd {
        ImageCmd::Pack { manifest, out } => {
            let img = pack(manifest)?;
            let bytes = img.to_bytes().map_err(|e| Failure::usage(e.to_string()))?;
            write_output(Some(out), &bytes)
        }
        ImageCmd::Unpack { image, dir } => unpack(&read_plain(image)?, dir),
        ImageCmd::Wrap { image, out, developer_id } => {
            let bytes = wrap(&read_plain(image)?, seed, developer_id.as_deref())?;
            write_output(Some(out), &bytes)
        }
        ImageCmd::Inspect { image } => inspect(&read_image(image)?, seed),
    }
}
