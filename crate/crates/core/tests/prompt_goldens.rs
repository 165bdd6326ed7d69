mod common;

#[test]
fn rendered_prompts_match_goldens() {
    let bad = common::golden_mismatches();
    assert!(
        bad.is_empty(),
        "golden mismatch: {bad:?} (rerun with CLAM_BLESS=1 after reviewing)"
    );
}

#[test]
fn goldens_carry_the_cues() {
    for (name, text) in common::golden_prompts() {
        assert!(!text.contains('\r'), "{name}");
        if name.ends_with(".detect.txt") && name.starts_with("ambig_trivia") {
            assert!(text.contains("This question is ambiguous:"), "{name}");
        }
        // The single-entity clarify exemplars end on the bare question.
        if name.ends_with(".clarify.txt") && !name.starts_with("claqua_single") {
            assert!(text.contains("ask the following"), "{name}");
        }
    }
}
