#![no_main]

use fwdstep::harness::{read_log_csv, write_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(log) = read_log_csv(data) {
        let mut out = Vec::new();
        write_csv(&log, &mut out, 1).expect("a parsed log can be written back");
        let again = read_log_csv(out.as_slice()).expect("rewritten log parses");
        assert_eq!(again.records.len(), log.records.len());
    }
});
