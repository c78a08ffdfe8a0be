//! Checked-in ATGD files. Set `ATTNVTG_BLESS=1` to rewrite them.

mod common;

use std::fs;

use attnvtg::*;
use common::{fixture_path, minimal_dump, multi_head_pair};

fn check_golden(name: &str, dump: &AttentionDump) {
    let bytes = dump_to_bytes(dump).unwrap();
    let path = fixture_path(name);
    if std::env::var_os("ATTNVTG_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, &bytes).unwrap();
    }
    let golden = fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(bytes, golden, "{name}: writer output drifted from the checked-in file");
    let read = dump_from_bytes(&golden).unwrap();
    assert_eq!(&read, dump);
    assert_eq!(dump_to_bytes(&read).unwrap(), golden);
}

#[test]
fn minimal_fixture() {
    check_golden("minimal.atgd", &minimal_dump());
}

#[test]
fn multi_head_fixture() {
    let (pos, _) = multi_head_pair();
    check_golden("multi_head.atgd", &pos);
    let header = fs::read(fixture_path("multi_head.atgd")).unwrap().len() - 5 * 3 * 16 * 4;
    let manifest_len = u32::from_le_bytes(fs::read(fixture_path("multi_head.atgd")).unwrap()[6..10].try_into().unwrap());
    assert_eq!(header, 10 + manifest_len as usize);
}

#[test]
fn zero_video_fixture() {
    let (_, zero) = multi_head_pair();
    assert_eq!(zero.kind, DumpKind::ZeroVideo);
    check_golden("zero_video.atgd", &zero);
}

#[test]
fn truncated_fixture_rejected() {
    let path = fixture_path("truncated.atgd");
    if std::env::var_os("ATTNVTG_BLESS").is_some() {
        let full = dump_to_bytes(&multi_head_pair().0).unwrap();
        fs::write(&path, &full[..full.len() - 100]).unwrap();
    }
    let bytes = fs::read(&path).unwrap();
    match dump_from_bytes(&bytes) {
        Err(Error::Truncated { section, expected, actual, .. }) => {
            assert_eq!(section, "payload");
            assert_eq!(expected - actual, 100);
        }
        other => panic!("expected a truncation error, got {other:?}"),
    }
    assert!(read_dump_file(&path).is_err());
}
