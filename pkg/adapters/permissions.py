from rest_framework import permissions

from core.runtime import get_framework


def _token_of(request) -> str:
    received = (request.headers.get('x-auth-token') or '').strip()
    if received:
        return received
    auth_header = (request.headers.get('Authorization') or '').strip()
    scheme, _, raw_value = auth_header.partition(' ')
    if raw_value and scheme.lower() in ('bearer', 'token'):
        return raw_value.strip()
    return ''


class HasFrameworkToken(permissions.BasePermission):
    """
    Valida o header x-auth-token contra a tabela de tokens do framework.
    Token ausente ou desconhecido gera UnauthorisedAccess (401).
    """

    def has_permission(self, request, view):
        request.consumer_id = get_framework().gateway.authenticate(_token_of(request))
        return True
