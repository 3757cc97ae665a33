mod common;

use common::fd::{audit, FdSettings};
use dplab::detector::ArchConfig;

// A lighter version of the acceptance audit: 16 clean probes per tensor.
#[test]
fn analytic_gradients_match_central_differences() {
    let arch = ArchConfig::default();
    let settings = FdSettings {
        probes_per_tensor: 16,
        h: 1e-4,
        floor: 1e-7,
        min_bases: 3,
        seed: 41,
    };
    let report = audit(&arch, &settings);
    for r in &report {
        eprintln!(
            "{:10} {:14} probes {:3} screened {:3} worst rel {:.2e}",
            r.loss, r.tensor, r.probes, r.screened, r.worst_rel
        );
    }
    for r in &report {
        assert_eq!(r.probes, 16, "{} {}", r.loss, r.tensor);
        assert!(r.worst_rel < 1e-4, "{} {}: {:.3e}", r.loss, r.tensor, r.worst_rel);
    }
}
