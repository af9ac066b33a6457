use proptest::prelude::*;
use true_core::model::{validate_spec, ExplanationSpec, Opcode, ReasoningStep};
use true_core::step_format::{parse_spec, serialize_spec};

/// A well-formed spec: givens, then computes over earlier names, then a select.
fn spec() -> impl Strategy<Value = ExplanationSpec> {
    let desc = "[a-zA-Z0-9 ;=,\"\\\\%.-]{0,24}";
    (
        prop::collection::vec((1u32..500, desc), 1..5),
        prop::collection::vec((prop::sample::select(vec!["+", "-", "*", "/"]), any::<prop::sample::Index>(), desc), 0..4),
        "[a-z_]{1,8}",
        "[a-z_]{1,8}",
    )
        .prop_map(|(givens, computes, pid, gen)| {
            let mut steps = Vec::new();
            let mut names: Vec<String> = Vec::new();
            for (v, d) in givens {
                let name = format!("g{}", names.len());
                steps.push(ReasoningStep::new(steps.len() + 1, Opcode::BindGiven).with_output(&name).with_expression(&v.to_string()).with_description(&d));
                names.push(name);
            }
            for (op, pick, d) in computes {
                let a = names.last().unwrap().clone();
                let b = names[pick.index(names.len())].clone();
                let name = format!("c{}", names.len());
                let inputs: Vec<&str> = if a == b { vec![a.as_str()] } else { vec![a.as_str(), b.as_str()] };
                steps.push(
                    ReasoningStep::new(steps.len() + 1, Opcode::Compute)
                        .with_inputs(&inputs)
                        .with_output(&name)
                        .with_expression(&format!("{a}{op}{b}"))
                        .with_description(&d),
                );
                names.push(name);
            }
            let last = names.last().unwrap().clone();
            steps.push(ReasoningStep::new(steps.len() + 1, Opcode::SelectAnswer).with_inputs(&[last.as_str()]).with_description("answer"));
            ExplanationSpec { problem_id: pid, steps, generator: gen }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn serialize_then_parse_is_identity(s in spec()) {
        prop_assert!(validate_spec(&s).is_empty(), "{:?}", validate_spec(&s));
        let text = serialize_spec(&s);
        let back = parse_spec(&text).map_err(|d| TestCaseError::fail(format!("{text}\n{d:?}")))?;
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(serialize_spec(&back), text);
    }
}

#[test]
fn grammar_doc_matches_the_parser() {
    let doc = include_str!("../../../docs/grammar.md");
    assert!(doc.contains(true_core::step_format::GRAMMAR_EBNF));
}
