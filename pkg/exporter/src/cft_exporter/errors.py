class ExportError(ValueError):
    """Anything that makes a checkpoint unexportable: unrecognized layout,
    unmapped tensors, shape inconsistencies, or unusable metadata."""
