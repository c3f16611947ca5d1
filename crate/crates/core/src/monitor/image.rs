// SPDX-License-Identifier: Apache-2.0

//! Enclave image file format.
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       5     magic "SRVS1"
//! 5       1     format version (1)
//! 6       1     flags: bit 0 set when the page bodies are encrypted
//! 7       1     reserved, zero
//! 8       2     page count
//! 10      2     reserved, zero
//! 12      8     entry offset from the enclave base
//! 20      16    developer id
//! 36      8*n   page descriptors:
//!                 u32 page index, u8 perms (R=1 W=2 X=4),
//!                 u8 type (1 REGULAR, 2 SHENCLAVE), u16 reserved
//! ...     16    nonce      (encrypted images only)
//! ...     16    tag        (encrypted images only)
//! ...     4096*n page bodies, in descriptor order
//! ```
//!
//! Encrypted images seal the concatenated bodies with Ascon-AEAD128 under the
//! developer key; the header and descriptors are the associated data.

use crate::crypto::{self, Ascon128, Key, LineAead, Nonce, Tag, NONCE_BYTES, TAG_BYTES};
use crate::machine::PAGE_BYTES;
use crate::tweak::{PageType, Perms};

pub const IMAGE_MAGIC: &[u8; 5] = b"SRVS1";
pub const IMAGE_VERSION: u8 = 1;
pub const FLAG_ENCRYPTED: u8 = 1;
pub const HEADER_BYTES: usize = 36;
pub const DESCRIPTOR_BYTES: usize = 8;
const PAGE: usize = PAGE_BYTES as usize;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u8),
    #[error("unknown flag bits {0:#04x}")]
    Flags(u8),
    #[error("file truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{0} trailing bytes after the last page")]
    Trailing(usize),
    #[error("image has no pages")]
    Empty,
    #[error("page {0}: unknown page type code {1}")]
    PageType(u32, u8),
    #[error("page {0}: permission bits {1:#04x} are not a subset of RWX")]
    Perms(u32, u8),
    #[error("page {0}: SHENCLAVE pages must not be writable")]
    WritableShared(u32),
    #[error("page index {0} appears twice")]
    DuplicatePage(u32),
    #[error("entry offset {0:#x} is not inside an executable page")]
    Entry(u64),
    #[error("page {0}: body must be exactly 4096 bytes")]
    BodySize(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePage {
    /// Page number relative to the enclave base.
    pub index: u32,
    /// Subset of R, W and X. The U bit is implied.
    pub perms: Perms,
    /// REGULAR or SHENCLAVE.
    pub page_type: PageType,
    pub data: Vec<u8>,
}

impl ImagePage {
    pub fn new(index: u32, perms: Perms, page_type: PageType, data: &[u8]) -> Self {
        let mut body = vec![0u8; PAGE];
        body[..data.len().min(PAGE)].copy_from_slice(&data[..data.len().min(PAGE)]);
        ImagePage {
            index,
            perms,
            page_type,
            data: body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveImage {
    pub entry_offset: u64,
    pub developer_id: [u8; 16],
    pub pages: Vec<ImagePage>,
}

fn perms_code(p: Perms) -> u8 {
    (p.contains(Perms::R) as u8) | (p.contains(Perms::W) as u8) << 1 | (p.contains(Perms::X) as u8) << 2
}

fn perms_from_code(c: u8) -> Perms {
    let mut p = Perms::empty();
    p.set(Perms::R, c & 1 != 0);
    p.set(Perms::W, c & 2 != 0);
    p.set(Perms::X, c & 4 != 0);
    p
}

fn type_code(t: PageType) -> u8 {
    match t {
        PageType::Regular => 1,
        PageType::ShEnclave => 2,
        _ => 0,
    }
}

impl EnclaveImage {
    /// Checks the structural rules shared by parsing and packing.
    pub fn validate(&self) -> Result<(), FormatError> {
        if self.pages.is_empty() {
            return Err(FormatError::Empty);
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.pages {
            if !seen.insert(p.index) {
                return Err(FormatError::DuplicatePage(p.index));
            }
            if !matches!(p.page_type, PageType::Regular | PageType::ShEnclave) {
                return Err(FormatError::PageType(p.index, type_code(p.page_type)));
            }
            if !(Perms::R | Perms::W | Perms::X).contains(p.perms) {
                return Err(FormatError::Perms(p.index, p.perms.bits()));
            }
            if p.page_type == PageType::ShEnclave && p.perms.contains(Perms::W) {
                return Err(FormatError::WritableShared(p.index));
            }
            if p.data.len() != PAGE {
                return Err(FormatError::BodySize(p.index));
            }
        }
        let entry_page = self.entry_offset / PAGE_BYTES;
        let ok = self
            .pages
            .iter()
            .any(|p| p.index as u64 == entry_page && p.perms.contains(Perms::X));
        if !ok {
            return Err(FormatError::Entry(self.entry_offset));
        }
        Ok(())
    }

    /// Number of pages spanned from the base up to the highest image page.
    pub fn span_pages(&self) -> u64 {
        self.pages.iter().map(|p| p.index as u64 + 1).max().unwrap_or(0)
    }

    fn header(&self, flags: u8) -> Vec<u8> {
        let mut h = Vec::with_capacity(HEADER_BYTES + DESCRIPTOR_BYTES * self.pages.len());
        h.extend_from_slice(IMAGE_MAGIC);
        h.push(IMAGE_VERSION);
        h.push(flags);
        h.push(0);
        h.extend_from_slice(&(self.pages.len() as u16).to_le_bytes());
        h.extend_from_slice(&[0, 0]);
        h.extend_from_slice(&self.entry_offset.to_le_bytes());
        h.extend_from_slice(&self.developer_id);
        for p in &self.pages {
            h.extend_from_slice(&p.index.to_le_bytes());
            h.push(perms_code(p.perms));
            h.push(type_code(p.page_type));
            h.extend_from_slice(&[0, 0]);
        }
        h
    }

    fn bodies(&self) -> Vec<u8> {
        self.pages.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    /// Plain serialization. This is also the input to the enclave identity
    /// hash, so wrapped and plain copies of one image share an identity.
    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        self.validate()?;
        let mut out = self.header(0);
        out.extend_from_slice(&self.bodies());
        Ok(out)
    }

    /// Encrypted serialization under `key`.
    pub fn wrap(&self, key: &Key, nonce: &Nonce) -> Result<Vec<u8>, FormatError> {
        self.validate()?;
        let mut out = self.header(FLAG_ENCRYPTED);
        let mut body = self.bodies();
        let tag = Ascon128.seal(key, nonce, &out, &mut body);
        out.extend_from_slice(nonce);
        out.extend_from_slice(&tag);
        out.extend_from_slice(&body);
        Ok(out)
    }

    /// 256-bit identity of the image contents.
    pub fn encid(&self) -> Result<[u8; 32], FormatError> {
        Ok(crypto::hash256(&[b"servas-encid", &self.to_bytes()?]))
    }
}

/// An image as read from disk, before any decryption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadedImage {
    Plain(EnclaveImage),
    Wrapped(WrappedImage),
}

impl LoadedImage {
    /// Header and descriptors. Page bodies are zero for wrapped images.
    pub fn shell(&self) -> &EnclaveImage {
        match self {
            LoadedImage::Plain(i) => i,
            LoadedImage::Wrapped(w) => &w.shell,
        }
    }

    pub fn developer_id(&self) -> [u8; 16] {
        match self {
            LoadedImage::Plain(i) => i.developer_id,
            LoadedImage::Wrapped(w) => w.shell.developer_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedImage {
    /// Header fields and descriptors, with empty page bodies.
    shell: EnclaveImage,
    header: Vec<u8>,
    nonce: Nonce,
    tag: Tag,
    ciphertext: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("encrypted image failed authentication")]
pub struct ImageAuthFailure;

impl WrappedImage {
    pub fn developer_id(&self) -> [u8; 16] {
        self.shell.developer_id
    }

    pub fn unwrap_with(&self, key: &Key) -> Result<EnclaveImage, ImageAuthFailure> {
        let mut body = self.ciphertext.clone();
        Ascon128
            .open(key, &self.nonce, &self.header, &mut body, &self.tag)
            .map_err(|_| ImageAuthFailure)?;
        let mut img = self.shell.clone();
        for (p, chunk) in img.pages.iter_mut().zip(body.chunks_exact(PAGE)) {
            p.data = chunk.to_vec();
        }
        Ok(img)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(FormatError::Truncated {
                need: end,
                have: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses and validates an image file.
pub fn load_enclave_image(bytes: &[u8]) -> Result<LoadedImage, FormatError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(5)? != IMAGE_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = c.u8()?;
    if version != IMAGE_VERSION {
        return Err(FormatError::Version(version));
    }
    let flags = c.u8()?;
    if flags & !FLAG_ENCRYPTED != 0 {
        return Err(FormatError::Flags(flags));
    }
    c.u8()?;
    let count = c.u16()? as usize;
    c.u16()?;
    let entry_offset = c.u64()?;
    let developer_id: [u8; 16] = c.take(16)?.try_into().unwrap();

    let mut pages = Vec::with_capacity(count);
    for _ in 0..count {
        let index = c.u32()?;
        let perms = c.u8()?;
        let ty = c.u8()?;
        c.u16()?;
        let page_type = match ty {
            1 => PageType::Regular,
            2 => PageType::ShEnclave,
            _ => return Err(FormatError::PageType(index, ty)),
        };
        if perms & !7 != 0 {
            return Err(FormatError::Perms(index, perms));
        }
        pages.push(ImagePage {
            index,
            perms: perms_from_code(perms),
            page_type,
            data: vec![0; PAGE],
        });
    }
    let header_end = c.pos;
    let wrap = if flags & FLAG_ENCRYPTED != 0 {
        let nonce: Nonce = c.take(NONCE_BYTES)?.try_into().unwrap();
        let tag: Tag = c.take(TAG_BYTES)?.try_into().unwrap();
        Some((nonce, tag))
    } else {
        None
    };
    let body = c.take(count * PAGE)?;
    if c.pos != bytes.len() {
        return Err(FormatError::Trailing(bytes.len() - c.pos));
    }
    let mut img = EnclaveImage {
        entry_offset,
        developer_id,
        pages,
    };
    img.validate()?;
    match wrap {
        None => {
            for (p, chunk) in img.pages.iter_mut().zip(body.chunks_exact(PAGE)) {
                p.data = chunk.to_vec();
            }
            Ok(LoadedImage::Plain(img))
        }
        Some((nonce, tag)) => Ok(LoadedImage::Wrapped(WrappedImage {
            shell: img,
            header: bytes[..header_end].to_vec(),
            nonce,
            tag,
            ciphertext: body.to_vec(),
        })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EnclaveImage {
        EnclaveImage {
            entry_offset: 0x10,
            developer_id: [7; 16],
            pages: vec![
                ImagePage::new(0, Perms::R | Perms::X, PageType::ShEnclave, b"code"),
                ImagePage::new(1, Perms::R | Perms::W, PageType::Regular, b"data"),
            ],
        }
    }

    #[test]
    fn plain_round_trip() {
        let img = sample();
        let bytes = img.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES + 2 * DESCRIPTOR_BYTES + 2 * PAGE);
        assert_eq!(load_enclave_image(&bytes).unwrap(), LoadedImage::Plain(img));
    }

    #[test]
    fn wrapped_round_trip_and_tamper() {
        let img = sample();
        let key = [3; 16];
        let mut bytes = img.wrap(&key, &[9; 16]).unwrap();
        let LoadedImage::Wrapped(w) = load_enclave_image(&bytes).unwrap() else {
            panic!("expected wrapped image");
        };
        assert_eq!(w.unwrap_with(&key).unwrap(), img);
        assert_eq!(w.unwrap_with(&[4; 16]), Err(ImageAuthFailure));

        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        let LoadedImage::Wrapped(w) = load_enclave_image(&bytes).unwrap() else {
            panic!("expected wrapped image");
        };
        assert_eq!(w.unwrap_with(&key), Err(ImageAuthFailure));
    }

    #[test]
    fn rejects_malformed() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            load_enclave_image(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        let mut b = bytes.clone();
        b[0] = b'X';
        assert_eq!(load_enclave_image(&b), Err(FormatError::BadMagic));
        let mut b = bytes.clone();
        b[5] = 2;
        assert_eq!(load_enclave_image(&b), Err(FormatError::Version(2)));
        let mut b = bytes.clone();
        b.push(0);
        assert_eq!(load_enclave_image(&b), Err(FormatError::Trailing(1)));
        // Make the SHENCLAVE code page writable.
        let mut b = bytes;
        b[HEADER_BYTES + 4] |= 2;
        assert_eq!(load_enclave_image(&b), Err(FormatError::WritableShared(0)));
    }

    #[test]
    fn entry_must_be_executable() {
        let mut img = sample();
        img.entry_offset = PAGE_BYTES + 8;
        assert_eq!(img.to_bytes(), Err(FormatError::Entry(PAGE_BYTES + 8)));
    }

    #[test]
    fn identity_ignores_wrapping_but_not_content() {
        let img = sample();
        let id = img.encid().unwrap();
        let mut other = img.clone();
        other.pages[1].data[100] ^= 1;
        assert_ne!(other.encid().unwrap(), id);
    }
}
