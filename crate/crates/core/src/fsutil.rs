//! Small filesystem helpers shared by dataset, checkpoint and report writers.

use std::fs;
use std::io::Write;
use std::path::Path;

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Replaces directory `dst` with `src` (both on the same filesystem).
pub fn replace_dir(src: &Path, dst: &Path) -> std::io::Result<()> {
    if dst.exists() {
        let old = dst.with_file_name(format!(".{}.old", dst.file_name().and_then(|n| n.to_str()).unwrap_or("dir")));
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(dst, &old)?;
        fs::rename(src, dst)?;
        fs::remove_dir_all(&old)
    } else {
        fs::rename(src, dst)
    }
}
