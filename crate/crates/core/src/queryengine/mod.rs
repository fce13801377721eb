//! Text prompt (plus optional capture time) to heatmap over a region store,
//! and the HTTP service exposing it.

mod heatmap;
pub mod service;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_metadata, text_encoder, CrossViewModel, TextEncoder};
use crate::error::{Error, Result};
use crate::geodata::CaptureTime;
use crate::mapstore::{model_checksum, RegionStore};

pub use heatmap::{colormap, cosine_scores, localize, normalize_scores, render_heatmap, Argmax, Heatmap, Sidecar, CLIP_BELOW};

/// Date-time fields a caller did not supply.
pub const DEFAULT_TIME: (i32, u32, u32, u32) = (2020, 1, 1, 12);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub region_id: String,
    pub text: String,
    pub year: Option<i32>,
    pub month: Option<u32>,
    pub day: Option<u32>,
    pub hour: Option<u32>,
    /// `None`: condition on metadata iff any date-time field is present.
    pub use_meta: Option<bool>,
    /// Return raw cosines instead of the normalized, clipped map.
    pub raw: bool,
}

impl QueryRequest {
    pub fn new(region_id: &str, text: &str) -> Self {
        QueryRequest {
            region_id: region_id.into(),
            text: text.into(),
            ..QueryRequest::default()
        }
    }

    pub fn with_time(mut self, t: CaptureTime) -> Self {
        self.year = Some(t.year());
        self.month = Some(t.month());
        self.day = Some(t.day());
        self.hour = Some(t.hour());
        self
    }

    fn has_time(&self) -> bool {
        self.year.is_some() || self.month.is_some() || self.day.is_some() || self.hour.is_some()
    }

    /// Supplied fields merged over `base` (the store's own capture time, or
    /// `DEFAULT_TIME`).
    pub fn capture_time(&self, base: Option<CaptureTime>) -> Result<Option<CaptureTime>> {
        if !self.has_time() {
            return Ok(None);
        }
        let (y, m, d, h) = base.map_or(DEFAULT_TIME, |b| (b.year(), b.month(), b.day(), b.hour()));
        CaptureTime::new(
            self.year.unwrap_or(y),
            self.month.unwrap_or(m),
            self.day.unwrap_or(d),
            self.hour.unwrap_or(h),
        )
        .map(Some)
    }
}

/// Which cell vectors a query compares against.
#[derive(Debug, Clone, PartialEq)]
enum CellSource {
    Stored,
    Conditioned(CaptureTime),
    Unconditioned,
}

/// Frozen text encoder plus the model whose dynamic encoder re-conditions
/// stored raw vectors.
pub struct QueryEngine {
    pub model: CrossViewModel,
    pub text: Box<dyn TextEncoder>,
    checksum: String,
}

impl QueryEngine {
    pub fn new(model: CrossViewModel) -> Result<Self> {
        let text = text_encoder(&model.config.text_adapter, model.dim())?;
        let checksum = model_checksum(&model)?;
        Ok(QueryEngine { model, text, checksum })
    }

    pub fn model_checksum(&self) -> &str {
        &self.checksum
    }

    fn source(&self, store: &RegionStore, req: &QueryRequest) -> Result<CellSource> {
        let time = req.capture_time(store.manifest.meta)?;
        Ok(match (req.use_meta, time) {
            (Some(false), _) if store.manifest.meta.is_none() => CellSource::Stored,
            (Some(false), _) => CellSource::Unconditioned,
            (_, Some(t)) if Some(t) == store.manifest.meta => CellSource::Stored,
            (_, Some(t)) => CellSource::Conditioned(t),
            (_, None) => CellSource::Stored,
        })
    }

    /// Re-derived cell embeddings, or `None` to use the stored ones.
    fn cells(&self, store: &RegionStore, source: &CellSource) -> Result<Option<Array2<f32>>> {
        let meta_time = match source {
            CellSource::Stored => return Ok(None),
            CellSource::Conditioned(t) => Some(*t),
            CellSource::Unconditioned => None,
        };
        let raw = store.raw.as_ref().ok_or_else(|| {
            Error::domain("region has no raw embeddings; metadata cannot be changed at query time")
        })?;
        if store.manifest.model_checksum != self.checksum {
            return Err(Error::domain("region was embedded with a different model"));
        }
        if meta_time.is_some() && self.model.dynamic.is_none() {
            return Err(Error::domain("model has no dynamic encoder; metadata is not supported"));
        }
        let grid = store.grid()?;
        let rows = (0..raw.nrows())
            .into_par_iter()
            .map(|i| {
                let meta = meta_time.map(|t| encode_metadata(grid.cell_centers[i], t));
                let o_raw = raw.row(i).mapv(f64::from);
                Ok(self.model.condition(&o_raw, meta.as_ref())?.to_f32())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Array2::zeros(raw.dim());
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&ndarray::ArrayView1::from(r.as_slice()));
        }
        Ok(Some(out))
    }

    /// Heatmap for one query. Read-only with respect to the store.
    pub fn query(&self, store: &RegionStore, req: &QueryRequest) -> Result<Heatmap> {
        if req.text.trim().is_empty() {
            return Err(Error::domain("query text is empty"));
        }
        let t = self.text.encode(&req.text)?;
        let source = self.source(store, req)?;
        let recomputed = self.cells(store, &source)?;
        let cells = recomputed.as_ref().unwrap_or(&store.embeddings);
        let sims = cosine_scores(cells.view(), t.values())?;
        let values = if req.raw { sims } else { normalize_scores(&sims) };
        let meta = match source {
            CellSource::Stored => store.manifest.meta,
            CellSource::Conditioned(t) => Some(t),
            CellSource::Unconditioned => None,
        };
        Heatmap::new(&store.grid()?, &req.text, meta, req.raw, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_time_fills_from_base() {
        let mut req = QueryRequest::new("r", "x");
        assert_eq!(req.capture_time(None).unwrap(), None);
        req.month = Some(7);
        assert_eq!(req.capture_time(None).unwrap(), Some(CaptureTime::new(2020, 7, 1, 12).unwrap()));
        let base = CaptureTime::new(2018, 3, 4, 5).unwrap();
        req.hour = Some(22);
        assert_eq!(req.capture_time(Some(base)).unwrap(), Some(CaptureTime::new(2018, 7, 4, 22).unwrap()));
        req.day = Some(31);
        req.month = Some(2);
        assert!(req.capture_time(None).is_err());
    }
}
