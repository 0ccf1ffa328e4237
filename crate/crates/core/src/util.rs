//! Small shared helpers: stable hashing for seed derivation and atomic file
//! writes.

use std::fs;
use std::io;
use std::path::Path;

/// FNV-1a 64-bit hash. Used to derive per-scope RNG seeds (per shop, per
/// word) from a base seed so that adding or removing one scope never shifts
/// the random draws of another. Stable across platforms and releases, unlike
/// `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Seed for a named sub-stream of `base`.
pub fn derive_seed(base: u64, scope: &str) -> u64 {
    base ^ fnv1a64(scope.as_bytes())
}

/// Writes `bytes` to `path` atomically: the content lands in a temporary
/// sibling first and is renamed into place, so readers never observe a
/// half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Order-independent fingerprint of a directory tree: FNV-1a over each
/// file's relative path and content, XOR-combined. Two trees digest equally
/// exactly when they hold the same files with the same bytes.
pub fn dir_digest(dir: &Path) -> io::Result<u64> {
    fn walk(root: &Path, dir: &Path, acc: &mut u64) -> io::Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                walk(root, &path, acc)?;
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("child of root")
                    .to_string_lossy()
                    .into_owned();
                let mut bytes = rel.into_bytes();
                bytes.push(0);
                bytes.extend(fs::read(&path)?);
                *acc ^= fnv1a64(&bytes);
            }
        }
        Ok(())
    }
    let mut acc = 0u64;
    walk(dir, dir, &mut acc)?;
    Ok(acc)
}
