"""Volume data handling: manifests, preprocessing, phantoms and case loading."""
