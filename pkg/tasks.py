"""
Background tasks for shot sampling
"""

import logging
from celery_app import celery
from models import ProtocolFileError, tree_from_dict
from simulate import sample_range
from statespace import PartySpace, PureState, decode_complex_array

logger = logging.getLogger(__name__)

@celery.task(bind=True)
def sample_shots_task(self, tree_data, dims, amplitudes, start, stop, seed):
    """Sample shots [start, stop) of a serialized protocol on a serialized state"""
    try:
        if not self.request.is_eager:
            self.update_state(state='PROGRESS', meta={'status': f'Sampling shots {start}-{stop}...'})

        tree = tree_from_dict(tree_data)
        prepared = PureState(PartySpace(tuple(dims)), decode_complex_array(amplitudes))
        counts = sample_range(tree, prepared, int(start), int(stop), int(seed))

        logger.info(f"Sampled shots {start}-{stop} with seed {seed}: {counts.counts}")
        return counts.to_dict()

    except ProtocolFileError as e:
        logger.error(f"Shot batch {start}-{stop} received a malformed protocol: {e}")
        raise
    except Exception as e:
        logger.error(f"Shot batch {start}-{stop} failed: {str(e)}")
        raise
