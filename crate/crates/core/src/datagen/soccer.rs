use std::collections::{BTreeMap, BTreeSet};

use super::{
    emit::describe, Column, DatagenError, DatasetKind, DatasetSpec, GeneratedDataset, OracleMetadata, Table,
    TrueParameters, SOCCER_MATCHDAYS, SOCCER_TEAMS,
};

/// Public mapping from model team index to the id in the source file.
pub const TEAMS_FILE: &str = "teams.csv";

const REQUIRED: [&str; 5] = ["home_team_id", "away_team_id", "home_goals", "away_goals", "matchday"];

struct Match {
    row: usize,
    home: i64,
    away: i64,
    home_goals: i64,
    away_goals: i64,
    matchday: i64,
}

/// Loads one season of results and splits it by matchday.
///
/// Team ids in the file may be any integers; they are renumbered `1..=18` in
/// ascending order of the original id. Optional `home_team`/`away_team`
/// columns supply names for `teams.csv`. Every team in the test split must
/// also play in the training split.
pub fn load_soccer(spec: &DatasetSpec) -> Result<GeneratedDataset, DatagenError> {
    spec.validate()?;
    let DatasetKind::Soccer(s) = &spec.kind else {
        return Err(DatagenError::InvalidSpec(format!("{} is not a soccer spec", spec.name)));
    };
    let path = s.csv_path.display().to_string();
    let text = std::fs::read_to_string(&s.csv_path).map_err(|e| DatagenError::io(&s.csv_path, e))?;
    let parse_err = |row: usize, message: String| DatagenError::Parse { path: path.clone(), row, message };

    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(0, e.to_string()))?.clone();
    let pos = |name: &str| header.iter().position(|h| h == name);
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(REQUIRED) {
        *slot = pos(name).ok_or_else(|| parse_err(0, format!("missing column {name:?}")))?;
    }
    let name_cols = (pos("home_team"), pos("away_team"));

    let mut matches = Vec::new();
    let mut names: BTreeMap<i64, String> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        let int = |k: usize| -> Result<i64, DatagenError> {
            let field = record.get(idx[k]).unwrap_or("");
            field.parse().map_err(|_| parse_err(row, format!("{} is not an integer: {field:?}", REQUIRED[k])))
        };
        let m = Match {
            row,
            home: int(0)?,
            away: int(1)?,
            home_goals: int(2)?,
            away_goals: int(3)?,
            matchday: int(4)?,
        };
        if m.home_goals < 0 || m.away_goals < 0 {
            return Err(parse_err(row, "goals must be non-negative".into()));
        }
        if !(1..=SOCCER_MATCHDAYS as i64).contains(&m.matchday) {
            return Err(parse_err(row, format!("matchday {} not in 1..={SOCCER_MATCHDAYS}", m.matchday)));
        }
        if m.home == m.away {
            return Err(parse_err(row, format!("team {} plays itself", m.home)));
        }
        if let (Some(h), Some(a)) = name_cols {
            for (id, col) in [(m.home, h), (m.away, a)] {
                let name = record.get(col).unwrap_or("").to_string();
                if let Some(prev) = names.insert(id, name.clone()) {
                    if prev != name {
                        return Err(parse_err(row, format!("team {id} is named both {prev:?} and {name:?}")));
                    }
                }
            }
        }
        matches.push(m);
    }

    let ids: BTreeSet<i64> = matches.iter().flat_map(|m| [m.home, m.away]).collect();
    if ids.len() != SOCCER_TEAMS {
        return Err(DatagenError::InvalidSpec(format!(
            "{path}: expected {SOCCER_TEAMS} distinct teams, found {}",
            ids.len()
        )));
    }
    let index: BTreeMap<i64, i64> = ids.iter().enumerate().map(|(i, &id)| (id, i as i64 + 1)).collect();

    let split = s.split_matchday as i64;
    let (train_m, test_m): (Vec<&Match>, Vec<&Match>) = matches.iter().partition(|m| m.matchday <= split);
    if train_m.is_empty() || test_m.is_empty() {
        return Err(DatagenError::InvalidSpec(format!(
            "split at matchday {split} leaves {} training and {} test matches; both must be non-empty",
            train_m.len(),
            test_m.len()
        )));
    }
    let seen: BTreeSet<i64> = train_m.iter().flat_map(|m| [m.home, m.away]).collect();
    if let Some(m) = test_m.iter().find(|m| !seen.contains(&m.home) || !seen.contains(&m.away)) {
        let team = if seen.contains(&m.home) { m.away } else { m.home };
        return Err(parse_err(m.row, format!("team {team} appears in the test split but never in training")));
    }

    let table = |ms: &[&Match]| {
        Table::new(vec![
            ("home_team_id", Column::Int(ms.iter().map(|m| index[&m.home]).collect())),
            ("away_team_id", Column::Int(ms.iter().map(|m| index[&m.away]).collect())),
            ("home_goals", Column::Int(ms.iter().map(|m| m.home_goals).collect())),
            ("away_goals", Column::Int(ms.iter().map(|m| m.away_goals).collect())),
            ("matchday", Column::Int(ms.iter().map(|m| m.matchday).collect())),
        ])
    };
    let (train, test) = (table(&train_m), table(&test_m));

    let mut teams = String::from(if names.is_empty() { "team_id,source_id\n" } else { "team_id,source_id,name\n" });
    for (id, i) in &index {
        match names.get(id) {
            Some(name) => teams.push_str(&format!("{i},{id},{name}\n")),
            None => teams.push_str(&format!("{i},{id}\n")),
        }
    }

    let oracle = OracleMetadata {
        spec: spec.clone(),
        schema: train.schema(),
        target: "home_goals".into(),
        oracle_nlpd: None,
        definition: "none: real data".into(),
        test_mean: Vec::new(),
        test_sd: Vec::new(),
        alternatives: BTreeMap::new(),
        contaminated_rows: Vec::new(),
        true_parameters: TrueParameters::None,
    };
    let descriptor = describe(spec, &train, &test);
    Ok(GeneratedDataset { train, test, oracle, descriptor, extra_files: vec![(TEAMS_FILE.to_string(), teams)] })
}
