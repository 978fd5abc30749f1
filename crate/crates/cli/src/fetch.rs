use std::path::PathBuf;
use std::time::Duration;

use epiqc_core::ingest::{FetchError, Fetcher, FileFetcher, SourceDescriptor};

/// HTTP(S) GET for URL endpoints, file reads for everything else.
pub struct EndpointFetcher {
    files: FileFetcher,
    timeout: Duration,
}

impl EndpointFetcher {
    pub fn new(base_dir: PathBuf, timeout: Duration) -> Self {
        Self {
            files: FileFetcher::new(base_dir),
            timeout,
        }
    }

    fn get(&self, url: &str) -> Result<Vec<u8>, FetchError> {
        let failed = |e: reqwest::Error| FetchError::Failed {
            endpoint: url.to_string(),
            message: e.to_string(),
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(failed)?;
        let resp = client.get(url).send().map_err(failed)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(FetchError::Status {
                endpoint: url.to_string(),
                status: status.as_u16(),
            });
        }
        Ok(resp.bytes().map_err(failed)?.to_vec())
    }
}

impl Fetcher for EndpointFetcher {
    fn fetch(&self, descriptor: &SourceDescriptor) -> Result<Vec<u8>, FetchError> {
        let endpoint = descriptor.endpoint.as_str();
        if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
            self.get(endpoint)
        } else {
            self.files.fetch(descriptor)
        }
    }
}
