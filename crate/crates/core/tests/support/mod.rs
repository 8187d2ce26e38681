pub mod curation_oracle;
