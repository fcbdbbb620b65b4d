use kgrag_core::stages::{render_context, ContextBundle, ContextDoc, ContextEntity, IntentScore, QueryPlan};

#[test]
fn render_context_matches_golden() {
    let bundle = ContextBundle {
        documents: vec![
            ContextDoc { chunk_id: "d2#0".into(), text: "Second ranked text.\n".into() },
            ContextDoc { chunk_id: "d1#0".into(), text: "Top ranked text.".into() },
        ],
        entities: vec![
            ContextEntity { name: "smart meter".into(), description: "device recording consumption".into() },
            ContextEntity { name: "tariff".into(), description: String::new() },
        ],
        relations: vec!["smart meter -> meter reading: produces".into()],
        ..ContextBundle::default()
    };
    let mut plan = QueryPlan::new("電費點計？");
    plan.intents =
        vec![IntentScore { label: "billing".into(), score: 3.0 }, IntentScore { label: "outage".into(), score: 2.0 }];
    let rendered = render_context(&bundle, &plan);
    assert_eq!(rendered, include_str!("golden/render_context.txt"));
    assert_eq!(rendered, render_context(&bundle, &plan));
}

#[test]
fn render_empty_bundle_without_intents() {
    let rendered = render_context(&ContextBundle::default(), &QueryPlan::new("Q"));
    assert_eq!(rendered, "## Entities\n\n## Relations\n\n## Documents\n\n## Question\nQ\n");
}
