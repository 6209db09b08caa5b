//! Enumerate every feasible plan in a synthetic world whose ranking quality is
//! a known function of the evidence gathered, and print the optimum per
//! archetype.

use agentrec::environment::SyntheticSuite;
use agentrec::planner::{brute_force_optimal_plan, count_plans};
use agentrec::toolkit::register_tools;
use agentrec::ExecConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let suite = SyntheticSuite::three_archetypes();
    suite.validate()?;
    let registry = register_tools(suite.domain);
    let config = ExecConfig::default();
    let n_tools = registry.names().filter(|t| !t.is_terminal()).count();
    println!("{} evidence tools, t_max {}: {} plans", n_tools, config.t_max, count_plans(n_tools, config.t_max, false));
    for a in &suite.archetypes {
        let plan = brute_force_optimal_plan(&a.world, &registry, &config)?;
        let names: Vec<&str> = plan.actions.iter().map(|t| t.as_str()).collect();
        println!("{:<7} history {:?}: reward {:.3}  {}", a.name, a.history_len, plan.reward, names.join(" > "));
    }
    Ok(())
}
