from ..uniseg_types import HeadKind, Json, LossKind, TauRule


def default_schema(url: bool = False) -> Json:
    """A basic default schema (to avoid copy & paste).

    Args:
        url (bool, optional): Determines whether to include the $schema url. Defaults to False.

    Returns:
        Json: A basic default schema
    """
    schema: Json = {}
    schema['type'] = 'object'
    schema['additionalProperties'] = False
    if url:
        schema['$schema'] = 'https://json-schema.org/draft/2020-12/schema'
    return schema


def string_list_schema(min_items: int = 0, unique: bool = True) -> Json:
    return {'type': 'array', 'items': {'type': 'string'}, 'minItems': min_items, 'uniqueItems': unique}


def taxonomy_schema() -> Json:
    """The schema of a taxonomy file {"dataset_id": ..., "classes": [...]}

    Returns:
        Json: The taxonomy schema
    """
    schema = default_schema(url=True)
    schema['properties'] = {'dataset_id': {'type': 'string', 'minLength': 1},
                            'classes': string_list_schema(min_items=1)}
    schema['required'] = ['dataset_id', 'classes']
    return schema


def train_options_schema() -> Json:
    """The fields of TrainConfig, all optional. Used both at the top level of a
    train config and for the stage1 and overrides sub-documents.

    Returns:
        Json: A properties dict (NOT a full schema)
    """
    # NOTE: lr0 = 0 is accepted; it is handy for checking that a run leaves the model unchanged.
    return {
        'loss_kind': {'type': 'string', 'enum': [k.value for k in LossKind]},
        'head_kind': {'type': 'string', 'enum': [k.value for k in HeadKind]},
        'lr0': {'type': ['number', 'null'], 'minimum': 0},
        'momentum': {'type': 'number', 'minimum': 0, 'exclusiveMaximum': 1},
        'poly_power': {'type': 'number', 'exclusiveMinimum': 0},
        'max_iters': {'type': 'integer', 'minimum': 1},
        'batch_size': {'type': 'integer', 'minimum': 1},
        'hflip': {'type': 'boolean'},
        'seed': {'type': 'integer', 'minimum': 0},
        'hidden_dim': {'type': 'integer', 'minimum': 1},
        'scale': {'type': 'number', 'exclusiveMinimum': 0},
        'tau_rule': {'type': 'string', 'enum': [r.value for r in TauRule]},
    }


def data_options_schema() -> Json:
    """Where the samples come from and how many to generate (ignored for dumps).

    Returns:
        Json: A properties dict (NOT a full schema)
    """
    return {
        'data': {'type': 'string', 'minLength': 1},
        'datasets': string_list_schema(min_items=1),
        'n_train_images': {'type': 'integer', 'minimum': 1},
        'n_test_images': {'type': 'integer', 'minimum': 1},
        'height': {'type': 'integer', 'minimum': 1},
        'width': {'type': 'integer', 'minimum': 1},
    }


def train_config_schema() -> Json:
    """The schema of the config file given to the train command.

    Returns:
        Json: The train config schema
    """
    stage1 = default_schema()
    stage1['properties'] = train_options_schema()

    schema = default_schema(url=True)
    schema['properties'] = {**train_options_schema(), **data_options_schema(), 'stage1': stage1}
    return schema


def experiment_config_schema() -> Json:
    """The schema of the config file given to the experiment command.

    Returns:
        Json: The experiment config schema
    """
    overrides = default_schema()
    overrides['properties'] = {**train_options_schema(), 'stage1': train_config_schema()['properties']['stage1']}

    schema = default_schema(url=True)
    schema['properties'] = {
        **data_options_schema(),
        'train_datasets': string_list_schema(),
        'held_out': string_list_schema(min_items=1),
        'unseen_datasets': string_list_schema(),
        'losses': {'type': 'array', 'minItems': 1, 'uniqueItems': True,
                   'items': {'type': 'string', 'enum': [k.value for k in LossKind]}},
        'overrides': overrides,
        'seeds': {'type': 'array', 'minItems': 1, 'uniqueItems': True,
                  'items': {'type': 'integer', 'minimum': 0}},
        'focus_classes': string_list_schema(),
        'single_best': {'type': 'boolean'},
    }
    schema['required'] = ['held_out']
    return schema


def hierarchy_spec_schema() -> Json:
    """The schema of the spec file given to the gen command.\n
    Either name a built-in fixture, or spell out a full hierarchy.

    Returns:
        Json: The hierarchy spec schema
    """
    coarsen = {'type': 'object',
               'additionalProperties': {'type': 'object', 'additionalProperties': {'type': 'string'}}}
    local_classes = {'type': 'object', 'additionalProperties': string_list_schema(min_items=1)}
    vector = {'type': 'array', 'items': {'type': 'number'}, 'minItems': 1}

    schema = default_schema(url=True)
    schema['properties'] = {
        'fixture': {'type': 'string', 'enum': ['default', 'benchmark']},
        'fine_classes': string_list_schema(min_items=1),
        'coarsen': coarsen,
        'local_classes': local_classes,
        'feature_dim': {'type': 'integer', 'minimum': 1},
        'cluster_means': {'type': 'array', 'items': vector, 'minItems': 1},
        'cluster_std': {'type': 'number', 'minimum': 0},
        'class_weights': {**vector, 'items': {'type': 'number', 'minimum': 0}},
        'min_rect': {'type': 'integer', 'minimum': 1},
        'max_rect': {'type': 'integer', 'minimum': 1},
        'seed': {'type': 'integer', 'minimum': 0},
        'n_train_images': {'type': 'integer', 'minimum': 1},
        'n_test_images': {'type': 'integer', 'minimum': 1},
        'height': {'type': 'integer', 'minimum': 1},
        'width': {'type': 'integer', 'minimum': 1},
    }
    hierarchy_keys = ['fine_classes', 'coarsen', 'feature_dim', 'cluster_means', 'cluster_std']
    # A fixture name and an explicit hierarchy are mutually exclusive.
    schema['oneOf'] = [{'required': ['fixture'], 'not': {'anyOf': [{'required': [k]} for k in hierarchy_keys]}},
                       {'required': hierarchy_keys, 'not': {'required': ['fixture']}}]
    return schema
