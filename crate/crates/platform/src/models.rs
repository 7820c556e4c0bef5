//! The built-in water-balance model as a registered algorithm.

use std::collections::BTreeMap;
use std::sync::Arc;

use ienv_core::catalog::AlgorithmKind;
use ienv_core::schema::{FieldDef, FieldKind};
use ienv_core::watershed::{self, BmpScenario, Catchment, DailyState, DailyWeather, LandUse, Report};
use ienv_core::{GeoRegion, PrincipalId, Record, Schema, Value};
use serde::{Deserialize, Serialize};

use crate::catalog::{NewAlgorithm, RecordInput};
use crate::compute::{Algorithm, InputData, JobContext, JobOutput, JobResult};
use crate::error::{Error, Result};
use crate::platform::Platform;

pub const WATER_BALANCE: &str = "water-balance";
pub const WATER_BALANCE_VERSION: &str = "1.0.0";

/// Suffix of per-nutrient concentration fields in a catchment dataset.
pub const CONCENTRATION_SUFFIX: &str = "_mg_l";

pub fn param_schema() -> Schema {
    Schema::new(vec![
        FieldDef::required("area_ha", FieldKind::Float),
        FieldDef::required("soil_capacity_mm", FieldKind::Float),
        FieldDef::required("et_coefficient", FieldKind::Float),
        FieldDef::optional("catchment_id", FieldKind::String),
        // BmpScenario as JSON text.
        FieldDef::optional("scenario", FieldKind::String),
    ])
    .expect("static schema is valid")
}

/// Schema of a catchment land-use table for the given nutrients.
pub fn catchment_schema(nutrients: &[&str]) -> Schema {
    let mut fields = vec![
        FieldDef::required("land_use", FieldKind::String),
        FieldDef::required("fraction", FieldKind::Float),
        FieldDef::required("curve_number", FieldKind::Float),
    ];
    fields.extend(nutrients.iter().map(|n| FieldDef::optional(format!("{n}{CONCENTRATION_SUFFIX}"), FieldKind::Float)));
    Schema::new(fields).expect("distinct nutrient names")
}

pub fn weather_schema() -> Schema {
    Schema::new(vec![
        FieldDef::required("date", FieldKind::Timestamp),
        FieldDef::required("precip_mm", FieldKind::Float),
        FieldDef::required("pet_mm", FieldKind::Float),
    ])
    .expect("static schema is valid")
}

/// `date,runoff_mm,et_mm,percolation_mm,soil_storage_mm,<nutrient>_kg…`.
pub fn result_schema<'a>(nutrients: impl IntoIterator<Item = &'a str>) -> Schema {
    let mut fields = vec![FieldDef::required("date", FieldKind::Timestamp)];
    for f in ["runoff_mm", "et_mm", "percolation_mm", "soil_storage_mm"] {
        fields.push(FieldDef::required(f, FieldKind::Float));
    }
    fields.extend(nutrients.into_iter().map(|n| FieldDef::required(format!("{n}_kg"), FieldKind::Float)));
    Schema::new(fields).expect("distinct nutrient names")
}

fn float(r: &Record, field: &str) -> std::result::Result<f64, String> {
    r.values.get(field).and_then(Value::as_f64).ok_or_else(|| format!("record {} lacks numeric `{field}`", r.record_id))
}

/// One land use per record: `land_use`, `fraction`, `curve_number` and
/// `<nutrient>_mg_l` concentrations.
pub fn catchment_from_records(
    catchment_id: &str,
    records: &[Record],
    area_ha: f64,
    soil_capacity_mm: f64,
    et_coefficient: f64,
    region: GeoRegion,
) -> std::result::Result<Catchment, String> {
    let mut land_uses = Vec::with_capacity(records.len());
    for r in records {
        let name = r.values.get("land_use").and_then(Value::as_str).ok_or("land use record lacks `land_use`")?;
        let conc =
            r.values.iter().filter_map(|(k, v)| Some((k.strip_suffix(CONCENTRATION_SUFFIX)?.to_owned(), v.as_f64()?))).collect();
        land_uses.push(LandUse {
            name: name.to_owned(),
            fraction: float(r, "fraction")?,
            curve_number: float(r, "curve_number")?,
            export_concentration_mg_per_l: conc,
        });
    }
    let c = Catchment { catchment_id: catchment_id.into(), area_ha, land_uses, soil_capacity_mm, et_coefficient, region };
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

/// Weather records ordered by date.
pub fn weather_from_records(records: &[Record]) -> std::result::Result<Vec<DailyWeather>, String> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let date = match r.values.get("date") {
            Some(Value::Timestamp(t)) => *t,
            _ => return Err(format!("record {} lacks a `date` timestamp", r.record_id)),
        };
        out.push(DailyWeather { date, precip_mm: float(r, "precip_mm")?, pet_mm: float(r, "pet_mm")? });
    }
    out.sort_by_key(|w| w.date);
    Ok(out)
}

pub fn state_records(states: &[DailyState]) -> Vec<RecordInput> {
    states
        .iter()
        .map(|s| {
            let mut values = BTreeMap::from([
                ("date".to_string(), Value::Timestamp(s.date)),
                ("runoff_mm".to_string(), Value::Float(s.runoff_mm)),
                ("et_mm".to_string(), Value::Float(s.et_mm)),
                ("percolation_mm".to_string(), Value::Float(s.percolation_mm)),
                ("soil_storage_mm".to_string(), Value::Float(s.soil_storage_mm)),
            ]);
            for (n, kg) in &s.loads_kg {
                values.insert(format!("{n}_kg"), Value::Float(*kg));
            }
            RecordInput::new(values)
        })
        .collect()
}

fn find_input<'a>(inputs: &'a [InputData], field: &str) -> Option<&'a InputData> {
    inputs.iter().find(|i| i.descriptor.schema.field(field).is_some())
}

/// Baseline (and scenario, when given) runs from job inputs.
pub struct WaterBalance;

impl Algorithm for WaterBalance {
    fn run(&self, ctx: &JobContext) -> std::result::Result<JobResult, String> {
        let catchment_in = find_input(&ctx.inputs, "curve_number").ok_or("no catchment input (needs `curve_number`)")?;
        let weather_in = find_input(&ctx.inputs, "precip_mm").ok_or("no weather input (needs `precip_mm`)")?;
        let p = |k: &str| ctx.params.get(k).and_then(Value::as_f64).ok_or_else(|| format!("param `{k}` missing"));
        let id = ctx
            .params
            .get("catchment_id")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .unwrap_or_else(|| catchment_in.descriptor.dataset_id.0.clone());
        let catchment = catchment_from_records(
            &id,
            &catchment_in.records,
            p("area_ha")?,
            p("soil_capacity_mm")?,
            p("et_coefficient")?,
            catchment_in.descriptor.region,
        )?;
        let scenario: Option<BmpScenario> = match ctx.params.get("scenario").and_then(Value::as_str) {
            Some(text) => Some(serde_json::from_str(text).map_err(|e| format!("param `scenario`: {e}"))?),
            None => None,
        };
        let weather = weather_from_records(&weather_in.records)?;
        let baseline = watershed::simulate(&catchment, &weather, None).map_err(|e| e.to_string())?;
        if ctx.is_cancelled() {
            return Err("cancelled".into());
        }
        let run = match &scenario {
            Some(s) => watershed::simulate(&catchment, &weather, Some(s)).map_err(|e| e.to_string())?,
            None => baseline.clone(),
        };
        let report = watershed::compare(&baseline, &run).map_err(|e| e.to_string())?;
        let nutrients = catchment.nutrients();
        let output = JobOutput {
            name: WATER_BALANCE.into(),
            schema: result_schema(nutrients.iter().map(String::as_str)),
            key_fields: vec!["date".into()],
            region: Some(catchment.region),
            records: state_records(&run),
        };
        let summary = serde_json::json!({
            "catchment_id": catchment.catchment_id,
            "scenario_id": scenario.as_ref().map(|s| s.scenario_id.clone()),
            "report": report,
        });
        Ok(JobResult { outputs: vec![output], summary: Some(summary) })
    }
}

/// Registers the model entry once and binds its body on every start.
pub(crate) fn install_builtin(platform: &Platform) -> Result<()> {
    if platform.algorithm_by_name(WATER_BALANCE, Some(WATER_BALANCE_VERSION)).is_none() {
        platform.transact(|tx| {
            tx.insert_algorithm(
                NewAlgorithm {
                    name: WATER_BALANCE.into(),
                    version: WATER_BALANCE_VERSION.into(),
                    kind: AlgorithmKind::Model,
                    param_schema: param_schema(),
                },
                &PrincipalId::system(),
            )
        })?;
    }
    platform.register_implementation(WATER_BALANCE, WATER_BALANCE_VERSION, Arc::new(WaterBalance));
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateRequest {
    pub catchment: Catchment,
    pub weather: Vec<DailyWeather>,
    #[serde(default)]
    pub scenario: Option<BmpScenario>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateResponse {
    pub baseline: Vec<DailyState>,
    #[serde(default)]
    pub scenario: Option<Vec<DailyState>>,
    /// Baseline against scenario, or against itself without one.
    pub report: Report,
}

impl Platform {
    /// Synchronous model run with no stored inputs or outputs.
    pub fn simulate_watershed(&self, req: &SimulateRequest, actor: &PrincipalId) -> Result<SimulateResponse> {
        if actor.is_anonymous() || self.principal(actor).is_none() {
            return Err(Error::Unauthenticated);
        }
        let baseline = watershed::simulate(&req.catchment, &req.weather, None)?;
        let scenario = match &req.scenario {
            Some(s) => Some(watershed::simulate(&req.catchment, &req.weather, Some(s))?),
            None => None,
        };
        let report = watershed::compare(&baseline, scenario.as_deref().unwrap_or(&baseline))?;
        Ok(SimulateResponse { baseline, scenario, report })
    }
}
