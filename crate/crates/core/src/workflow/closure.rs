use std::collections::{BTreeSet, HashMap};

use indexmap::IndexMap;

use super::{JobSpec, WorkflowError};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mark {
    InProgress,
    Done,
}

/// Smallest superset of `targets` closed under `needs`.
///
/// Fails on an unknown target or when a cycle is reachable from the targets;
/// the cycle error lists the jobs around the loop, first job repeated last.
pub fn needs_closure(
    jobs: &IndexMap<String, JobSpec>,
    targets: &BTreeSet<String>,
) -> Result<BTreeSet<String>, WorkflowError> {
    let mut marks: HashMap<&str, Mark> = HashMap::new();
    let mut out = BTreeSet::new();
    for target in targets {
        if !jobs.contains_key(target.as_str()) {
            return Err(WorkflowError::UnknownJob(target.clone()));
        }
        let mut path: Vec<&str> = Vec::new();
        visit(jobs, target, &mut marks, &mut path, &mut out)?;
    }
    Ok(out)
}

fn visit<'a>(
    jobs: &'a IndexMap<String, JobSpec>,
    id: &'a str,
    marks: &mut HashMap<&'a str, Mark>,
    path: &mut Vec<&'a str>,
    out: &mut BTreeSet<String>,
) -> Result<(), WorkflowError> {
    match marks.get(id) {
        Some(Mark::Done) => return Ok(()),
        Some(Mark::InProgress) => {
            let start = path.iter().position(|p| *p == id).unwrap_or(0);
            let mut cycle: Vec<String> = path[start..].iter().map(|s| s.to_string()).collect();
            cycle.push(id.to_string());
            return Err(WorkflowError::Cycle(cycle));
        }
        None => {}
    }
    let (key, job) = jobs
        .get_key_value(id)
        .ok_or_else(|| WorkflowError::UnknownJob(id.to_string()))?;
    marks.insert(key.as_str(), Mark::InProgress);
    path.push(key.as_str());
    for need in &job.needs {
        visit(jobs, need, marks, path, out)?;
    }
    path.pop();
    marks.insert(key.as_str(), Mark::Done);
    out.insert(key.clone());
    Ok(())
}
