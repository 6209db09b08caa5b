//! Turn successful reasoning traces into a tool catalog: filter, normalize
//! steps, embed, cluster per domain and map clusters onto tools.

use agentrec::io::read_jsonl;
use agentrec::mining::{mine, CoTTrace, HashingEmbedder, MiningConfig, OpTable};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let path = std::env::args().nth(1).map_or(root.join("fixtures/traces.jsonl"), Into::into);
    let traces: Vec<CoTTrace> = read_jsonl(&path)?;
    let out = mine(&traces, &OpTable::default(), &HashingEmbedder, &MiningConfig::default())?;

    println!("kept {} of {} traces", out.filter.kept, out.filter.input);
    for d in &out.domains {
        println!("\n{} ({} steps): k = {}", d.domain.as_str(), d.n_steps, d.model.k);
        for (card, entry) in d.cards.iter().zip(&d.mapping) {
            let tools: Vec<&str> = entry.tools.iter().map(|t| t.as_str()).collect();
            println!("  #{} size {:>3} {:<18} -> {}", card.cluster_id, card.size, card.dominant_op, tools.join(", "));
            if let Some(b) = card.bullets.first() {
                println!("       e.g. {b}");
            }
        }
    }
    println!("\nneeds review: {:?}", out.mapping.needs_review);
    Ok(())
}
