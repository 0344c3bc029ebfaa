import os

from flask import Blueprint, Response, current_app, jsonify, request
from pydantic import ValidationError

from ganprop import limiter
from ganprop.config import QueryServerConfig
from ganprop.errors import ShapeError
from ganprop.schemas import GenerateRequest, SampleRequest

# Only the generator surfaces are exposed: blind samples and samples for caller-chosen codes.
query_blueprint = Blueprint('query', __name__)


def query_limit() -> str:
    return os.environ.get('GANPROP_QUERY_LIMIT', QueryServerConfig.DEFAULT_LIMIT)


def _no_target() -> tuple[Response, int]:
    return jsonify({'message': 'No target generator loaded'}), 404


def _request_body() -> dict:
    request_data = request.get_json(silent=True)
    return request_data if isinstance(request_data, dict) else {}


@query_blueprint.after_request
def add_security_headers(response: Response) -> Response:
    response.headers['X-Content-Type-Options'] = 'nosniff'
    if request.path.startswith('/api/'):
        response.headers['Cache-Control'] = 'no-cache, no-store, must-revalidate'
    return response


@query_blueprint.route('/api/info')
def get_target_info() -> Response:
    target = current_app.target_generator
    if target is None:
        return _no_target()
    return jsonify({
        'model_id': target.model_id,
        'latent_dim': target.latent_dim,
        'prior': target.prior.kind,
        'sample_width': target.sample_width,
        'queries_served': current_app.query_counter.value,
    })


@query_blueprint.route('/api/sample', methods=['POST'])
@limiter.limit(query_limit)
def sample_blind() -> Response:
    target = current_app.target_generator
    if target is None:
        return _no_target()

    try:
        validated_data = SampleRequest(**_request_body())
    except ValidationError as e:
        return jsonify({'message': e.errors()[0]['msg']}), 400

    samples = target.sample_blind(validated_data.n, validated_data.seed)
    served = current_app.query_counter.add(len(samples))
    current_app.logger.info(f"Served {len(samples)} blind samples ({served} total)")
    return jsonify({'samples': samples.tolist()})


@query_blueprint.route('/api/generate', methods=['POST'])
@limiter.limit(query_limit)
def generate_from_codes() -> Response:
    target = current_app.target_generator
    if target is None:
        return _no_target()

    try:
        validated_data = GenerateRequest(**_request_body())
    except ValidationError as e:
        return jsonify({'message': e.errors()[0]['msg']}), 400

    try:
        samples = target.generate_from(validated_data.codes)
    except ShapeError as error:
        current_app.logger.warning(f"Rejected latent codes: {error}")
        return jsonify({'message': str(error)}), 400

    served = current_app.query_counter.add(len(samples))
    current_app.logger.info(f"Served {len(samples)} samples for chosen codes ({served} total)")
    return jsonify({'samples': samples.tolist()})
