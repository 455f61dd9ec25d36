//! Weight persistence: a fixed header, a JSON manifest describing every
//! parameter's place in the blob, then raw little-endian f32s. The manifest
//! carries hashes of the config and blob so a loaded network either matches
//! what was saved bit for bit or refuses to come up.

use crate::error::{CliError, Result};
use mmkd_core::network::{Alignment, Network, NetworkConfig, Role};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"MMKC";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob that follows the manifest.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub role: Role,
    pub alignment: Alignment,
    pub network: NetworkConfig,
    /// Seed the parameters were initialized from.
    pub seed: u64,
    pub config_sha256: String,
    pub blob_sha256: String,
    pub params: Vec<ParamEntry>,
}

pub fn config_hash(network: &NetworkConfig, role: &Role, alignment: &Alignment, seed: u64) -> String {
    let doc = serde_json::to_string(&(network, role, alignment, seed)).expect("config serializes");
    hex::encode(Sha256::digest(doc.as_bytes()))
}

pub fn save(net: &Network<f32>, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(net.params.len());
    for p in &net.params {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        role: net.role,
        alignment: net.alignment,
        network: net.cfg.clone(),
        seed: net.seed,
        config_sha256: config_hash(&net.cfg, &net.role, &net.alignment, net.seed),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        params: entries,
    };
    let mjson = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(4 + 1 + 8 + mjson.len() + blob.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&mjson);
    out.extend_from_slice(&blob);
    std::fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn split_file<'a>(bytes: &'a [u8], path: &Path) -> Result<(Manifest, &'a [u8])> {
    let name = path.display();
    if bytes.len() < 13 {
        return Err(CliError::Format(format!("{name}: too short for a checkpoint header")));
    }
    if bytes[..4] != MAGIC {
        return Err(CliError::Format(format!(
            "{name}: bad magic {:?}, expected {MAGIC:?}",
            &bytes[..4]
        )));
    }
    if bytes[4] != VERSION {
        return Err(CliError::Format(format!(
            "{name}: unsupported checkpoint version {}, expected {VERSION}",
            bytes[4]
        )));
    }
    let mlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let rest = &bytes[13..];
    if mlen > rest.len() {
        return Err(CliError::Integrity(format!(
            "{name}: manifest length {mlen} exceeds file remainder {}",
            rest.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&rest[..mlen])
        .map_err(|e| CliError::Integrity(format!("{name}: manifest does not parse: {e}")))?;
    Ok((manifest, &rest[mlen..]))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(split_file(&bytes, path)?.0)
}

/// Rebuilds the network described by the manifest and overwrites its
/// parameters from the blob. `force` skips the two hash checks, nothing else.
pub fn load(path: &Path, force: bool) -> Result<Network<f32>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let name = path.display();
    let (manifest, blob) = split_file(&bytes, path)?;

    if !force {
        let want = config_hash(&manifest.network, &manifest.role, &manifest.alignment, manifest.seed);
        if manifest.config_sha256 != want {
            return Err(CliError::Integrity(format!(
                "{name}: config hash mismatch (stored {}, computed {want}); pass --force to load anyway",
                manifest.config_sha256
            )));
        }
        let got = hex::encode(Sha256::digest(blob));
        if manifest.blob_sha256 != got {
            return Err(CliError::Integrity(format!(
                "{name}: parameter blob hash mismatch; pass --force to load anyway"
            )));
        }
    }

    let mut net = match manifest.role {
        Role::Teacher(kind) => Network::teacher(manifest.network.clone(), kind, manifest.seed),
        Role::Student(sc) => {
            Network::student(manifest.network.clone(), sc, manifest.alignment, manifest.seed)
        }
    }
    .map_err(|e| CliError::Integrity(format!("{name}: manifest network invalid: {e}")))?;

    if net.params.len() != manifest.params.len() {
        return Err(CliError::Integrity(format!(
            "{name}: manifest lists {} parameters, architecture has {}",
            manifest.params.len(),
            net.params.len()
        )));
    }
    for (p, e) in net.params.iter_mut().zip(&manifest.params) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(CliError::Integrity(format!(
                "{name}: parameter {} {:?} does not match manifest entry {} {:?}",
                p.name,
                p.value.shape(),
                e.name,
                e.shape
            )));
        }
        let len = 4 * p.value.data().len();
        let at = e.offset as usize;
        if at + len > blob.len() {
            return Err(CliError::Integrity(format!(
                "{name}: parameter {} extends past the blob end",
                e.name
            )));
        }
        for (v, chunk) in p.value.data_mut().iter_mut().zip(blob[at..at + len].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    let expect: usize = manifest.params.iter().map(|e| 4 * e.shape.iter().product::<usize>()).sum();
    if blob.len() != expect {
        return Err(CliError::Integrity(format!(
            "{name}: blob holds {} bytes, manifest accounts for {expect}",
            blob.len()
        )));
    }
    Ok(net)
}
