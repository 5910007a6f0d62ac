from .sampling import CropRecord, crop_pair, pad_array, pad_to_multiple, random_crop
from .scribbles import check_scribbles, gen_scribbles
from .synth import GenerationError, synth_pair
from .volume import (
    IGNORE_VALUE,
    CaseRecord,
    LabelMask,
    ModalityPair,
    RVolCorruptionError,
    RVolFormatError,
    ScribbleMask,
    Volume,
    load_case,
    load_dataset,
    read_index,
    read_label_mask,
    read_scribble,
    read_volume,
    write_index,
    write_mask,
    write_volume,
)
