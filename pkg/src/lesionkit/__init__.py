"""Volumetric lesion classification: XmasNet CNN, radiomics + boosted trees, ensemble selection."""
__version__ = "0.1.0"
