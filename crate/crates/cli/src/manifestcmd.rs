//! `make-manifest`: scan the `uw/`, `ref/`, `depth/` convention into a
//! JSONL manifest.

use std::path::Path;
use uwnr_core::data::scan_convention;
use uwnr_core::Result;

pub fn make_manifest_cmd(root: &Path, out: &Path) -> Result<usize> {
    let manifest = scan_convention(root)?;
    manifest.write(out)?;
    Ok(manifest.len())
}
