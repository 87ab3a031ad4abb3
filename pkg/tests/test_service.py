import pytest
from fastapi.testclient import TestClient

from nmsleak.clock import ClockSpec
from nmsleak.errors import EndpointUnreachable
from nmsleak.raster import Raster, decode_raw, encode_png, encode_raw
from nmsleak.service import RemoteDetectorHandle, RttSample, create_app, serve, timed_query


@pytest.fixture
def client(detector):
    return TestClient(create_app(detector))


def post_raw(client, raster, **headers):
    return client.post('/detect', content=encode_raw(raster),
                       headers={'Content-Type': 'application/octet-stream', **headers})


def test_detect_returns_boxes_without_scores(client, forge):
    response = post_raw(client, forge(0.8, 9, n_objects=2).raster, **{'X-Request-Id': 'abc'})
    assert response.status_code == 200
    body = response.json()
    assert body['id'] == 'abc'
    assert len(body['detections']) == 2
    for detection in body['detections']:
        assert set(detection) == {'box', 'class'}
        assert len(detection['box']) == 4


def test_png_payloads_are_accepted(client):
    response = client.post('/detect', content=encode_png(Raster.black(32, 64)), headers={'Content-Type': 'image/png'})
    assert response.status_code == 200
    assert response.json()['detections'] == []


def test_malformed_payload_is_a_400(client):
    response = client.post('/detect', content=b'garbage', headers={'Content-Type': 'application/octet-stream'})
    assert response.status_code == 400
    assert response.json()['detail']['reason'] == 'invalid_raster'


def test_declared_shape_must_match(client):
    response = post_raw(client, Raster.black(32, 32), **{'X-Raster-Height': '64', 'X-Raster-Width': '32'})
    assert response.status_code == 400
    assert response.json()['detail']['reason'] == 'shape_mismatch'
    response = post_raw(client, Raster.black(32, 32), **{'X-Raster-Height': 'tall'})
    assert response.json()['detail']['reason'] == 'bad_header'


def test_health(client):
    assert client.get('/health').json() == {'status': 'ok'}


def test_rtt_sample_must_be_positive():
    with pytest.raises(ValueError):
        RttSample('x', 0.0)


def test_loopback_round_trip(detector, forge):
    scene = forge(0.8, 12)
    with serve(detector, host='127.0.0.1', port=0, clock_spec=ClockSpec()) as service:
        assert service.port != 0
        response, rtt = timed_query(service.url, scene.raster, repeats=3)
        assert len(rtt.samples) == 3
        assert len(response.detections) == 1

        handle = RemoteDetectorHandle(service.url)
        raster = decode_raw(encode_raw(scene.raster))
        local = detector.detect(raster)
        result = handle.query(raster)
        handle.close()
    assert result.detected
    assert [d.box for d in result.detections] == [d.box for d in local[0]]
    # the modeled handler sleeps for the modeled total
    assert result.total_time >= local[1].total_time


def test_unreachable_endpoint():
    with pytest.raises(EndpointUnreachable):
        timed_query('http://127.0.0.1:9', Raster.black(32, 32), timeout=2.0)
