use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::NaiveDateTime;
use serde::Serialize;
use tokio::sync::OnceCell;

use tidecast::dataset::Dataset;
use tidecast::ensemble::{EnsembleSummary, ForecastEnsemble};
use tidecast::model::DiffusionModel;
use tidecast::sampler::{rollout, RolloutJob};

use crate::error::ApiError;

/// Largest accepted horizon (hours) and scenario count per request.
pub const MAX_HORIZON: usize = 168;
pub const MAX_SCENARIOS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ForecastKey {
    pub patch_id: String,
    pub start: NaiveDateTime,
    pub horizon: usize,
    pub scenarios: usize,
    pub seed: u64,
}

#[derive(Debug)]
pub struct StoredEnsemble {
    pub id: String,
    pub ensemble: ForecastEnsemble,
    pub summary: EnsembleSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct LogEntry {
    pub method: String,
    pub path: String,
    pub status: u16,
}

#[derive(Default)]
struct Loaded {
    model: Option<Arc<DiffusionModel>>,
    checkpoint_id: String,
    dataset: Option<Arc<Dataset>>,
}

type Flight = Arc<OnceCell<Arc<StoredEnsemble>>>;

/// Shared service state: one model, one dataset, and the ensemble cache.
#[derive(Default)]
pub struct ServiceState {
    loaded: RwLock<Loaded>,
    flights: Mutex<HashMap<ForecastKey, Flight>>,
    by_id: Mutex<BTreeMap<String, Arc<StoredEnsemble>>>,
    log: Mutex<Vec<LogEntry>>,
    computations: AtomicUsize,
}

fn fnv(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ServiceState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replace the model; cached ensembles from the old model are dropped.
    pub fn load_model(&self, model: DiffusionModel) -> tidecast::Result<()> {
        let id = model.checkpoint_id()?;
        let mut l = self.loaded.write().expect("state lock poisoned");
        l.model = Some(Arc::new(model));
        l.checkpoint_id = id;
        self.clear_cache();
        Ok(())
    }

    pub fn load_dataset(&self, dataset: Dataset) {
        let mut l = self.loaded.write().expect("state lock poisoned");
        l.dataset = Some(Arc::new(dataset));
        self.clear_cache();
    }

    fn clear_cache(&self) {
        self.flights.lock().expect("cache lock poisoned").clear();
        self.by_id.lock().expect("cache lock poisoned").clear();
    }

    pub fn model(&self) -> Result<(Arc<DiffusionModel>, String), ApiError> {
        let l = self.loaded.read().expect("state lock poisoned");
        match &l.model {
            Some(m) => Ok((m.clone(), l.checkpoint_id.clone())),
            None => Err(ApiError::unavailable("no model checkpoint loaded")),
        }
    }

    pub fn dataset(&self) -> Result<Arc<Dataset>, ApiError> {
        let l = self.loaded.read().expect("state lock poisoned");
        l.dataset
            .clone()
            .ok_or_else(|| ApiError::unavailable("no dataset loaded"))
    }

    pub fn is_ready(&self) -> (bool, bool) {
        let l = self.loaded.read().expect("state lock poisoned");
        (l.model.is_some(), l.dataset.is_some())
    }

    /// Number of ensembles actually sampled (cache misses).
    pub fn computations(&self) -> usize {
        self.computations.load(Ordering::SeqCst)
    }

    pub fn ensemble(&self, id: &str) -> Option<Arc<StoredEnsemble>> {
        self.by_id.lock().expect("cache lock poisoned").get(id).cloned()
    }

    /// Register an externally produced ensemble (e.g. loaded from disk).
    pub fn insert_ensemble(&self, ensemble: ForecastEnsemble) -> tidecast::Result<String> {
        ensemble.validate()?;
        let text = ensemble.encode();
        let id = format!("x{:016x}", fnv(&text));
        let stored = StoredEnsemble {
            id: id.clone(),
            summary: ensemble.summary(),
            ensemble,
        };
        self.by_id
            .lock()
            .expect("cache lock poisoned")
            .insert(id.clone(), Arc::new(stored));
        Ok(id)
    }

    pub fn record(&self, entry: LogEntry) {
        self.log.lock().expect("log lock poisoned").push(entry);
    }

    pub fn request_log(&self) -> Vec<LogEntry> {
        self.log.lock().expect("log lock poisoned").clone()
    }

    fn validate_key(key: &ForecastKey) -> Result<(), ApiError> {
        if key.horizon == 0 || key.horizon > MAX_HORIZON {
            return Err(ApiError::unprocessable(format!("horizon must be in 1..={MAX_HORIZON}")));
        }
        if key.scenarios == 0 || key.scenarios > MAX_SCENARIOS {
            return Err(ApiError::unprocessable(format!("scenarios must be in 1..={MAX_SCENARIOS}")));
        }
        Ok(())
    }

    /// Fetch or compute the ensemble for `key`. Concurrent calls with the
    /// same key share one computation.
    pub async fn forecast(&self, key: ForecastKey) -> Result<Arc<StoredEnsemble>, ApiError> {
        Self::validate_key(&key)?;
        let (model, checkpoint_id) = self.model()?;
        let dataset = self.dataset()?;
        let job = RolloutJob::from_dataset(&dataset, &key.patch_id, key.start, model.config.context_len, key.seed)?;
        let flight = self
            .flights
            .lock()
            .expect("cache lock poisoned")
            .entry(key.clone())
            .or_default()
            .clone();
        let stored = flight
            .get_or_try_init(|| async {
                self.computations.fetch_add(1, Ordering::SeqCst);
                let horizon = key.horizon;
                let scenarios = key.scenarios;
                let ensemble = tokio::task::spawn_blocking(move || rollout(&model, &job, horizon, scenarios))
                    .await
                    .map_err(|e| ApiError::new(
                        axum::http::StatusCode::INTERNAL_SERVER_ERROR,
                        "internal",
                        format!("forecast task failed: {e}"),
                    ))??;
                let id = format!(
                    "e{:016x}",
                    fnv(&format!(
                        "{}|{}|{}|{}|{}|{}",
                        key.patch_id, key.start, key.horizon, key.scenarios, key.seed, checkpoint_id
                    ))
                );
                Ok::<_, ApiError>(Arc::new(StoredEnsemble {
                    id,
                    summary: ensemble.summary(),
                    ensemble,
                }))
            })
            .await?
            .clone();
        self.by_id
            .lock()
            .expect("cache lock poisoned")
            .insert(stored.id.clone(), stored.clone());
        Ok(stored)
    }
}
